//! Synthetic multi-domain classification data with known ground truth.
//!
//! Each class `k` is an isotropic Gaussian `N(μ_k, σ_k² I)`. A domain is an
//! affine map `x ↦ R_θ x + o` where `R_θ` rotates every coordinate pair
//! `(2i, 2i+1)` by `θ`. Because the rotation is orthogonal the transformed
//! component is again isotropic, so the Bayes posterior stays closed form on
//! every domain.
//!
//! Splits: `train`, `val` and `test_id` are drawn from in-distribution (ID)
//! domains only; `test_ood` comes exclusively from the held-out domains;
//! `pretrain` is an independent draw over every domain and is what the
//! general-purpose generator and embedder learn from.

use crate::container::{self, ContainerError, Cursor};
use crate::seed;
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("spec hash mismatch: file has {found}, expected {expected}")]
    SpecMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub name: String,
    pub offset: Vec<f64>,
    /// Rotation angle in radians.
    pub angle: f64,
    /// Held out from train/val/test-ID.
    pub ood: bool,
}

impl Domain {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (s, c) = self.angle.sin_cos();
        let mut out = x.to_vec();
        for pair in 0..x.len() / 2 {
            let (a, b) = (x[2 * pair], x[2 * pair + 1]);
            out[2 * pair] = c * a - s * b;
            out[2 * pair + 1] = s * a + c * b;
        }
        for (o, off) in out.iter_mut().zip(&self.offset) {
            *o += off;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dims: usize,
    pub domains: Vec<Domain>,
    pub class_means: Vec<Vec<f64>>,
    pub class_cov_scale: Vec<f64>,
    pub samples_per_class_per_domain: usize,
    /// Per class per domain, over all domains.
    pub pretrain_per_class_per_domain: usize,
    /// Fractions of each ID (class, domain) cell going to train and val; the
    /// rest is test-ID.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

/// Knobs for [`SyntheticSpec::standard`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StandardSpecParams {
    pub num_classes: usize,
    pub dims: usize,
    /// Standard deviation of each class-mean coordinate.
    pub mean_scale: f64,
    pub noise_scale: f64,
    pub id_angles: Vec<f64>,
    pub ood_angles: Vec<f64>,
    /// Per-coordinate standard deviation of the domain offsets.
    pub id_offset_scale: f64,
    pub ood_offset_scale: f64,
    pub samples_per_class_per_domain: usize,
    pub pretrain_per_class_per_domain: usize,
}

impl Default for StandardSpecParams {
    fn default() -> Self {
        Self {
            num_classes: 6,
            dims: 16,
            mean_scale: 0.65,
            noise_scale: 1.0,
            id_angles: vec![0.0, 0.12, -0.12],
            ood_angles: vec![0.55, -0.55],
            id_offset_scale: 0.15,
            ood_offset_scale: 0.8,
            samples_per_class_per_domain: 200,
            pretrain_per_class_per_domain: 200,
        }
    }
}

const ID_NAMES: [&str; 4] = ["alpine", "autumn", "dusk", "meadow"];
const OOD_NAMES: [&str; 4] = ["harbor", "desert", "night", "snow"];

impl SyntheticSpec {
    /// Draws class means and domain offsets from `seed`.
    pub fn standard(params: &StandardSpecParams, seed: u64) -> Self {
        let mut rng = seed::child_rng(seed, "spec");
        let d = params.dims;
        let gauss = |scale: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..d)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let class_means = (0..params.num_classes)
            .map(|_| gauss(params.mean_scale, &mut rng))
            .collect();
        let mut domains = Vec::new();
        for (i, &angle) in params.id_angles.iter().enumerate() {
            domains.push(Domain {
                name: name_for(&ID_NAMES, "id", i),
                offset: if i == 0 {
                    vec![0.0; d]
                } else {
                    gauss(params.id_offset_scale, &mut rng)
                },
                angle,
                ood: false,
            });
        }
        for (i, &angle) in params.ood_angles.iter().enumerate() {
            domains.push(Domain {
                name: name_for(&OOD_NAMES, "ood", i),
                offset: gauss(params.ood_offset_scale, &mut rng),
                angle,
                ood: true,
            });
        }
        Self {
            num_classes: params.num_classes,
            dims: d,
            domains,
            class_means,
            class_cov_scale: vec![params.noise_scale; params.num_classes],
            samples_per_class_per_domain: params.samples_per_class_per_domain,
            pretrain_per_class_per_domain: params.pretrain_per_class_per_domain,
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.dims < 2 {
            return bad(format!("need at least 2 dims, got {}", self.dims));
        }
        if self.class_means.len() != self.num_classes
            || self.class_cov_scale.len() != self.num_classes
        {
            return bad("class_means/class_cov_scale must have num_classes entries".into());
        }
        if self.class_means.iter().any(|m| m.len() != self.dims) {
            return bad("class mean with wrong dimension".into());
        }
        for i in 0..self.num_classes {
            for j in 0..i {
                if self.class_means[i] == self.class_means[j] {
                    return bad(format!("class means {j} and {i} coincide"));
                }
            }
        }
        if self
            .class_cov_scale
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return bad("class_cov_scale must be finite and non-negative".into());
        }
        if self.domains.iter().any(|d| d.offset.len() != self.dims) {
            return bad("domain offset with wrong dimension".into());
        }
        if !self.domains.iter().any(|d| !d.ood) || !self.domains.iter().any(|d| d.ood) {
            return bad("need at least one ID and one OOD domain".into());
        }
        if self.samples_per_class_per_domain == 0 {
            return bad("samples_per_class_per_domain must be positive".into());
        }
        let (tf, vf) = (self.train_fraction, self.val_fraction);
        if !(tf > 0.0 && vf > 0.0 && tf + vf <= 1.0) {
            return bad("train/val fractions must be positive and sum to at most 1".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        seed::hash_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }

    /// Indices of the in-distribution domains.
    pub fn id_domains(&self) -> Vec<usize> {
        (0..self.domains.len()).filter(|&i| !self.domains[i].ood).collect()
    }

    pub fn ood_domains(&self) -> Vec<usize> {
        (0..self.domains.len()).filter(|&i| self.domains[i].ood).collect()
    }

    fn split_counts(&self) -> (usize, usize) {
        let n = self.samples_per_class_per_domain;
        let train = ((n as f64) * self.train_fraction).round() as usize;
        let val = ((n as f64) * self.val_fraction).round() as usize;
        (train.min(n), val.min(n - train.min(n)))
    }

    /// Mean of class `k` under domain `d`.
    pub fn component_mean(&self, class: usize, domain: usize) -> Vec<f64> {
        self.domains[domain].apply(&self.class_means[class])
    }
}

fn name_for(names: &[&str], prefix: &str, i: usize) -> String {
    names
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("{prefix}{i}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestId,
    TestOod,
    Pretrain,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Val,
        Split::TestId,
        Split::TestOod,
        Split::Pretrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
            Split::Pretrain => "pretrain",
        }
    }

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(c: u32) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

/// Points with labels; the unit every trainer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Array2<f64>, y: Vec<usize>) -> Self {
        assert_eq!(x.nrows(), y.len(), "one label per row");
        Self { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.y.iter().max().map_or(0, |m| m + 1)
    }

    pub fn concat(&self, other: &LabeledSet) -> LabeledSet {
        if other.is_empty() {
            return self.clone();
        }
        let x = ndarray::concatenate(ndarray::Axis(0), &[self.x.view(), other.x.view()])
            .expect("same dimensionality");
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        LabeledSet { x, y }
    }

    pub fn select(&self, rows: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select(ndarray::Axis(0), rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub spec: SyntheticSpec,
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split(&self, split: Split) -> LabeledSet {
        let rows = self.indices(split);
        LabeledSet {
            x: self.x.select(ndarray::Axis(0), &rows),
            y: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn split_domains(&self, split: Split) -> Vec<usize> {
        self.indices(split).iter().map(|&r| self.domains[r]).collect()
    }

    pub fn split_sizes(&self) -> Vec<(Split, usize)> {
        Split::ALL
            .iter()
            .map(|&s| (s, self.splits.iter().filter(|&&t| t == s).count()))
            .collect()
    }
}

fn draw_point(spec: &SyntheticSpec, class: usize, dom: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let sigma = spec.class_cov_scale[class];
    let point: Vec<f64> = spec.class_means[class]
        .iter()
        .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    spec.domains[dom]
        .apply(&point)
        .into_iter()
        .map(|v| v as f32 as f64)
        .collect()
}

/// Fresh draws from the generating mixture: `per_cell` points for every
/// (domain, class) pair in `domains`, independent of the dataset's own
/// streams.
pub fn sample_mixture(
    spec: &SyntheticSpec,
    domains: &[usize],
    per_cell: usize,
    seed: u64,
) -> Result<LabeledSet, DatasetError> {
    spec.validate()?;
    if let Some(&bad) = domains.iter().find(|&&d| d >= spec.domains.len()) {
        return Err(DatasetError::InvalidSpec(format!("no domain {bad}")));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for &dom in domains {
        for class in 0..spec.num_classes {
            let mut rng = seed::child_rng(seed, &format!("mixture/{dom}/{class}"));
            for _ in 0..per_cell {
                rows.extend(draw_point(spec, class, dom, &mut rng));
                labels.push(class);
            }
        }
    }
    let n = labels.len();
    Ok(LabeledSet::new(
        Array2::from_shape_vec((n, spec.dims), rows).expect("row-major fill"),
        labels,
    ))
}

/// Draws the full dataset. Values are rounded to `f32` precision so the
/// 32-bit file format round-trips exactly.
pub fn make_dataset(spec: &SyntheticSpec) -> Result<LabeledDataset, DatasetError> {
    spec.validate()?;
    let d = spec.dims;
    let (n_train, n_val) = spec.split_counts();
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    let mut splits = Vec::new();

    let mut push = |rng: &mut rand_chacha::ChaCha8Rng, class: usize, dom: usize, split: Split| {
        rows.extend(draw_point(spec, class, dom, rng));
        labels.push(class);
        domains.push(dom);
        splits.push(split);
    };

    for (dom, domain) in spec.domains.iter().enumerate() {
        for class in 0..spec.num_classes {
            let mut rng = seed::child_rng(spec.seed, &format!("data/{dom}/{class}"));
            for i in 0..spec.samples_per_class_per_domain {
                let split = if domain.ood {
                    Split::TestOod
                } else if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::TestId
                };
                push(&mut rng, class, dom, split);
            }
            let mut rng = seed::child_rng(spec.seed, &format!("pretrain/{dom}/{class}"));
            for _ in 0..spec.pretrain_per_class_per_domain {
                push(&mut rng, class, dom, Split::Pretrain);
            }
        }
    }
    let n = labels.len();
    Ok(LabeledDataset {
        spec: spec.clone(),
        x: Array2::from_shape_vec((n, d), rows).expect("row-major fill"),
        labels,
        domains,
        splits,
    })
}

/// Which domains the oracle's mixture covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainScope {
    All,
    Id,
    Ood,
    Named(Vec<String>),
}

/// Argmax-posterior classifier of the generating mixture (equal class
/// priors, equal domain weights within a class).
#[derive(Debug, Clone)]
pub struct BayesOracle {
    num_classes: usize,
    /// (class, mean, variance)
    components: Vec<(usize, Vec<f64>, f64)>,
}

const MIN_VARIANCE: f64 = 1e-12;

pub fn bayes_oracle(spec: &SyntheticSpec, scope: &DomainScope) -> BayesOracle {
    let chosen: Vec<usize> = spec
        .domains
        .iter()
        .enumerate()
        .filter(|(_, d)| match scope {
            DomainScope::All => true,
            DomainScope::Id => !d.ood,
            DomainScope::Ood => d.ood,
            DomainScope::Named(names) => names.contains(&d.name),
        })
        .map(|(i, _)| i)
        .collect();
    let mut components = Vec::new();
    for class in 0..spec.num_classes {
        let var = (spec.class_cov_scale[class].powi(2)).max(MIN_VARIANCE);
        for &dom in &chosen {
            components.push((class, spec.component_mean(class, dom), var));
        }
    }
    BayesOracle {
        num_classes: spec.num_classes,
        components,
    }
}

impl BayesOracle {
    /// Unnormalized log posterior per class.
    pub fn log_posterior(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let d = x.len() as f64;
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); self.num_classes];
        for (class, mean, var) in &self.components {
            let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
            per_class[*class].push(-sq / (2.0 * var) - 0.5 * d * var.ln());
        }
        per_class
            .into_iter()
            .map(|terms| {
                if terms.is_empty() {
                    return f64::NEG_INFINITY;
                }
                let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
            })
            .collect()
    }

    pub fn label(&self, x: ArrayView1<f64>) -> usize {
        let lp = self.log_posterior(x);
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        best
    }

    pub fn labels(&self, x: &Array2<f64>) -> Vec<usize> {
        x.rows().into_iter().map(|r| self.label(r)).collect()
    }
}

const DATASET_MAGIC: &[u8; 8] = b"RDDATA\0\0";
const DATASET_VERSION: u32 = 1;

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<(), DatasetError> {
    let header = json!({
        "spec": ds.spec,
        "seed": ds.spec.seed,
        "spec_hash": ds.spec.hash(),
        "rows": ds.len(),
        "dims": ds.spec.dims,
        "split_sizes": ds
            .split_sizes()
            .into_iter()
            .map(|(s, n)| (s.as_str().to_string(), json!(n)))
            .collect::<serde_json::Map<_, _>>(),
        "blocks": ["samples:f32", "labels:u32", "domains:u32", "splits:u32"],
    });
    let blocks = vec![
        container::f32_block(ds.x.iter().copied()),
        container::u32_block(ds.labels.iter().map(|&v| v as u32)),
        container::u32_block(ds.domains.iter().map(|&v| v as u32)),
        container::u32_block(ds.splits.iter().map(|s| s.code())),
    ];
    container::write(path, DATASET_MAGIC, DATASET_VERSION, header, &blocks)?;
    Ok(())
}

/// Loads a dataset file. With `expected_spec_hash`, a file whose recorded
/// spec hash differs is rejected.
pub fn load_dataset(
    path: &Path,
    expected_spec_hash: Option<&str>,
) -> Result<LabeledDataset, DatasetError> {
    let (header, payload) = container::read(path, DATASET_MAGIC, "dataset", DATASET_VERSION)?;
    let corrupt = |m: &str| DatasetError::Container(ContainerError::Corrupt(m.to_string()));
    let spec: SyntheticSpec = serde_json::from_value(header["spec"].clone())
        .map_err(|e| corrupt(&format!("spec: {e}")))?;
    let recorded = header["spec_hash"]
        .as_str()
        .ok_or_else(|| corrupt("missing spec_hash"))?
        .to_string();
    if recorded != spec.hash() {
        return Err(corrupt("recorded spec hash does not match stored spec"));
    }
    if let Some(expected) = expected_spec_hash {
        if expected != recorded {
            return Err(DatasetError::SpecMismatch {
                expected: expected.to_string(),
                found: recorded,
            });
        }
    }
    let rows = header["rows"].as_u64().ok_or_else(|| corrupt("missing rows"))? as usize;
    let dims = spec.dims;
    let mut cur = Cursor::new(&payload);
    let xs = cur.f32s(rows * dims)?;
    let labels = cur.u32s(rows)?;
    let domains = cur.u32s(rows)?;
    let splits = cur.u32s(rows)?;
    cur.finish()?;
    let splits = splits
        .into_iter()
        .map(|c| Split::from_code(c).ok_or_else(|| corrupt("unknown split code")))
        .collect::<Result<Vec<_>, _>>()?;
    if labels.iter().any(|&l| l as usize >= spec.num_classes)
        || domains.iter().any(|&d| d as usize >= spec.domains.len())
    {
        return Err(corrupt("label or domain index out of range"));
    }
    Ok(LabeledDataset {
        x: Array2::from_shape_vec((rows, dims), xs).map_err(|_| corrupt("sample block shape"))?,
        labels: labels.into_iter().map(|v| v as usize).collect(),
        domains: domains.into_iter().map(|v| v as usize).collect(),
        splits,
        spec,
    })
}
