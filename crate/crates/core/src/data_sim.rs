//! Synthetic datasets, Dirichlet non-IID partitioning and feature-space
//! augmentation.
//!
//! Unlabeled samples keep their true labels, but only inside a quarantined
//! field that training code cannot reach; evaluation code reads them through
//! [`oracle`].

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    class_count: usize,
    feature_dim: usize,
    seed: u64,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
}

impl Dataset {
    /// Checks that labels are in range, dims agree and every class occurs.
    pub fn new(class_count: usize, seed: u64, x: Vec<Vec<f64>>, y: Vec<usize>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                x.len(),
                y.len()
            )));
        }
        let feature_dim = x.first().map_or(0, Vec::len);
        if x.iter().any(|r| r.len() != feature_dim) {
            return Err(Error::Data("samples have differing feature dims".into()));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        let present: BTreeSet<usize> = y.iter().copied().collect();
        if present.len() != class_count {
            return Err(Error::Data(format!(
                "only {} of {class_count} classes present",
                present.len()
            )));
        }
        Ok(Self {
            class_count,
            feature_dim,
            seed,
            x,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(&self.y, self.class_count)
    }
}

pub(crate) fn histogram(labels: &[usize], class_count: usize) -> Vec<usize> {
    let mut h = vec![0; class_count];
    for &l in labels {
        h[l] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct LabeledPart {
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    #[serde(default)]
    indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct UnlabeledPart {
    x: Vec<Vec<f64>>,
    #[serde(default)]
    indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct HiddenLabels {
    labels: Vec<usize>,
}

/// One client's local data.
///
/// `indices` record where each sample came from in the global dataset; they
/// are empty for hand-built clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    client_id: usize,
    labeled: LabeledPart,
    unlabeled: UnlabeledPart,
    #[serde(rename = "_oracle")]
    hidden: HiddenLabels,
}

impl ClientDataset {
    /// A client whose unlabeled samples carry hidden true labels, aligned by
    /// position with `unlabeled_x`.
    pub fn with_hidden_labels(
        client_id: usize,
        labeled: Vec<(Vec<f64>, usize)>,
        unlabeled_x: Vec<Vec<f64>>,
        hidden_labels: Vec<usize>,
    ) -> Result<Self> {
        if unlabeled_x.len() != hidden_labels.len() {
            return Err(Error::Data(format!(
                "{} unlabeled samples but {} hidden labels",
                unlabeled_x.len(),
                hidden_labels.len()
            )));
        }
        let (x, y) = labeled.into_iter().unzip();
        Ok(Self {
            client_id,
            labeled: LabeledPart {
                x,
                y,
                indices: Vec::new(),
            },
            unlabeled: UnlabeledPart {
                x: unlabeled_x,
                indices: Vec::new(),
            },
            hidden: HiddenLabels {
                labels: hidden_labels,
            },
        })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    /// Copy of this client under a different id.
    pub fn with_client_id(&self, client_id: usize) -> Self {
        Self {
            client_id,
            ..self.clone()
        }
    }

    pub fn labeled_x(&self) -> &[Vec<f64>] {
        &self.labeled.x
    }

    pub fn labeled_y(&self) -> &[usize] {
        &self.labeled.y
    }

    pub fn unlabeled_x(&self) -> &[Vec<f64>] {
        &self.unlabeled.x
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.y.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.x.len()
    }

    pub fn len(&self) -> usize {
        self.n_labeled() + self.n_unlabeled()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labeled_indices(&self) -> &[usize] {
        &self.labeled.indices
    }

    pub fn unlabeled_indices(&self) -> &[usize] {
        &self.unlabeled.indices
    }

    /// Global indices of every sample held by this client.
    pub fn all_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.labeled
            .indices
            .iter()
            .chain(&self.unlabeled.indices)
            .copied()
    }
}

/// Evaluation-only access to the hidden labels of unlabeled samples.
///
/// Training code (local training, aggregation) must never call into this
/// module; an audit test enforces it.
pub mod oracle {
    use super::{histogram, ClientDataset};

    /// True labels of `client`'s unlabeled samples, in storage order.
    pub fn true_labels(client: &ClientDataset) -> &[usize] {
        &client.hidden.labels
    }

    /// Class histogram over all of a client's samples, labeled and unlabeled.
    pub fn full_histogram(client: &ClientDataset, class_count: usize) -> Vec<usize> {
        let mut h = histogram(&client.labeled.y, class_count);
        for (a, b) in h
            .iter_mut()
            .zip(histogram(&client.hidden.labels, class_count))
        {
            *a += b;
        }
        h
    }

    /// Mean total-variation distance between each client's class distribution
    /// and the pooled distribution.
    pub fn heterogeneity(clients: &[ClientDataset], class_count: usize) -> f64 {
        let hists: Vec<Vec<usize>> = clients
            .iter()
            .map(|c| full_histogram(c, class_count))
            .collect();
        let mut global = vec![0usize; class_count];
        for h in &hists {
            for (g, v) in global.iter_mut().zip(h) {
                *g += v;
            }
        }
        let total: usize = global.iter().sum();
        if total == 0 || clients.is_empty() {
            return 0.0;
        }
        let tv_sum: f64 = hists
            .iter()
            .map(|h| {
                let n: usize = h.iter().sum();
                if n == 0 {
                    return 0.0;
                }
                0.5 * h
                    .iter()
                    .zip(&global)
                    .map(|(&a, &g)| (a as f64 / n as f64 - g as f64 / total as f64).abs())
                    .sum::<f64>()
            })
            .sum();
        tv_sum / clients.len() as f64
    }
}

/// Isotropic Gaussian class clusters with means on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    spread: f64,
    seed: u64,
}

impl GaussianMixture {
    pub fn new(class_count: usize, feature_dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if class_count == 0 || feature_dim == 0 {
            return Err(Error::Config(
                "mixture needs at least one class and one dim".into(),
            ));
        }
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(Error::Config(format!(
                "spread must be positive, got {spread}"
            )));
        }
        let mut r = rng::derived(seed, &[stream::MIXTURE_MEANS]);
        let means = (0..class_count)
            .map(|_| loop {
                let v: Vec<f64> = (0..feature_dim)
                    .map(|_| StandardNormal.sample(&mut r))
                    .collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|a| a / norm).collect();
                }
            })
            .collect();
        Ok(Self {
            means,
            spread,
            seed,
        })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Draws `counts[c]` samples of class `c`, class-major order. Different
    /// `stream_id`s give independent draws around the same means.
    pub fn sample(&self, counts: &[usize], stream_id: u64) -> Result<Dataset> {
        if counts.len() != self.means.len() {
            return Err(Error::Config(format!(
                "{} class counts for {} classes",
                counts.len(),
                self.means.len()
            )));
        }
        if counts.contains(&0) {
            return Err(Error::Config(
                "every class needs at least one sample".into(),
            ));
        }
        let mut r = rng::derived(self.seed, &[stream::MIXTURE_SAMPLES, stream_id]);
        let mut x = Vec::with_capacity(counts.iter().sum());
        let mut y = Vec::with_capacity(x.capacity());
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let v = self.means[c]
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        m + self.spread * z
                    })
                    .collect();
                x.push(v);
                y.push(c);
            }
        }
        Dataset::new(self.means.len(), self.seed, x, y)
    }
}

pub fn gen_gaussian_mixture(
    class_count: usize,
    feature_dim: usize,
    n_per_class: &[usize],
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    GaussianMixture::new(class_count, feature_dim, spread, seed)?.sample(n_per_class, 0)
}

/// Exponential long-tail: `round(n_max * imbalance_factor^(-c / (C - 1)))`.
pub fn make_imbalanced_counts(
    class_count: usize,
    n_max: usize,
    imbalance_factor: f64,
) -> Result<Vec<usize>> {
    if class_count == 0 {
        return Err(Error::Config("class count must be positive".into()));
    }
    if !(imbalance_factor >= 1.0 && imbalance_factor.is_finite()) {
        return Err(Error::Config(format!(
            "imbalance factor must be >= 1, got {imbalance_factor}"
        )));
    }
    if (n_max as f64) < imbalance_factor {
        return Err(Error::Config(format!(
            "n_max {n_max} is smaller than imbalance factor {imbalance_factor}"
        )));
    }
    if class_count == 1 {
        return Ok(vec![n_max]);
    }
    let counts: Vec<usize> = (0..class_count)
        .map(|c| {
            let e = -(c as f64) / (class_count - 1) as f64;
            (n_max as f64 * imbalance_factor.powf(e)).round() as usize
        })
        .collect();
    if counts.contains(&0) {
        return Err(Error::Config(format!(
            "imbalanced counts {counts:?} contain zero"
        )));
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha: f64,
    #[serde(default)]
    pub labeled_client_ids: Vec<usize>,
    /// Per-client fraction of samples that keep their labels. Defaults to 1.0
    /// for labeled clients and 0.0 for the rest.
    #[serde(default)]
    pub label_fraction: Option<Vec<f64>>,
    /// When set, the labeled clients together receive this share of the
    /// dataset as a class-stratified uniform draw; only the remainder is
    /// split by Dirichlet proportions among the other clients.
    #[serde(default)]
    pub labeled_share: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

/// Maximum number of redraws when a Dirichlet split leaves a client empty.
pub const MAX_PARTITION_REDRAWS: u64 = 100;

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("partition needs at least one client".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if let Some(&bad) = self.labeled_client_ids.iter().find(|&&k| k >= self.clients) {
            return Err(Error::Config(format!(
                "labeled client id {bad} out of range"
            )));
        }
        let labeled: BTreeSet<usize> = self.labeled_client_ids.iter().copied().collect();
        if labeled.len() != self.labeled_client_ids.len() {
            return Err(Error::Config("duplicate labeled client ids".into()));
        }
        if let Some(f) = &self.label_fraction {
            if f.len() != self.clients {
                return Err(Error::Config(format!(
                    "label_fraction has {} entries for {} clients",
                    f.len(),
                    self.clients
                )));
            }
            for (k, &v) in f.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "label_fraction[{k}] = {v} outside [0, 1]"
                    )));
                }
                if v > 0.0 && !labeled.contains(&k) {
                    return Err(Error::Config(format!(
                        "client {k} has label_fraction {v} but is not a labeled client"
                    )));
                }
            }
        }
        if let Some(s) = self.labeled_share {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Config(format!(
                    "labeled_share must be in (0, 1), got {s}"
                )));
            }
            if labeled.is_empty() || labeled.len() == self.clients {
                return Err(Error::Config(
                    "labeled_share needs both labeled and unlabeled clients".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn fraction_for(&self, client: usize) -> f64 {
        match &self.label_fraction {
            Some(f) => f[client],
            None if self.labeled_client_ids.contains(&client) => 1.0,
            None => 0.0,
        }
    }
}

/// Splits `total` into integer parts proportional to `weights` using the
/// largest-remainder method; ties go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let quotas: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn sample_dirichlet<R: Rng>(alpha: f64, k: usize, r: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(r)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|v| v / sum).collect()
    } else {
        // every gamma draw underflowed: the alpha -> 0 limit is one-hot
        let mut p = vec![0.0; k];
        p[r.random_range(0..k)] = 1.0;
        p
    }
}

/// Distributes per-class index lists over `n_clients` by Dirichlet
/// proportions, redrawing when a client ends up empty.
fn dirichlet_split(
    by_class: &[Vec<usize>],
    n_clients: usize,
    alpha: f64,
    seed: u64,
    group: u64,
) -> Result<Vec<Vec<usize>>> {
    for attempt in 0..MAX_PARTITION_REDRAWS {
        let mut r = rng::derived(seed, &[stream::PARTITION, group, attempt]);
        let mut out = vec![Vec::new(); n_clients];
        for idx in by_class {
            let p = sample_dirichlet(alpha, n_clients, &mut r);
            let counts = largest_remainder(&p, idx.len());
            let mut start = 0;
            for (k, n) in counts.into_iter().enumerate() {
                out[k].extend_from_slice(&idx[start..start + n]);
                start += n;
            }
        }
        if out.iter().all(|c| !c.is_empty()) {
            return Ok(out);
        }
    }
    Err(Error::Partition(format!(
        "a client stayed empty after {MAX_PARTITION_REDRAWS} Dirichlet redraws \
         (alpha {alpha}, {n_clients} clients)"
    )))
}

/// Dirichlet non-IID partition of `ds` into clients, followed by the
/// per-client labeled/unlabeled split.
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    if spec.clients > ds.len() {
        return Err(Error::Partition(format!(
            "{} clients but only {} samples",
            spec.clients,
            ds.len()
        )));
    }
    let mut shuffle_rng = rng::derived(spec.seed, &[stream::PARTITION, u64::MAX]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(&mut shuffle_rng);
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); spec.clients];
    match spec.labeled_share {
        None => {
            let split = dirichlet_split(&by_class, spec.clients, spec.alpha, spec.seed, 0)?;
            assignment = split;
        }
        Some(share) => {
            let labeled: Vec<usize> = {
                let mut v = spec.labeled_client_ids.clone();
                v.sort_unstable();
                v
            };
            let others: Vec<usize> = (0..spec.clients).filter(|k| !labeled.contains(k)).collect();
            let sizes: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
            let pool_total = (share * ds.len() as f64).round() as usize;
            let pool_counts = largest_remainder(&sizes, pool_total);
            let (pool, rest): (Vec<Vec<usize>>, Vec<Vec<usize>>) = by_class
                .iter()
                .zip(&pool_counts)
                .map(|(idx, &n)| (idx[..n].to_vec(), idx[n..].to_vec()))
                .unzip();
            if pool_total < labeled.len() || ds.len() - pool_total < others.len() {
                return Err(Error::Partition(format!(
                    "labeled_share {share} leaves a client group without samples"
                )));
            }
            let lab_split = dirichlet_split(&pool, labeled.len(), spec.alpha, spec.seed, 1)?;
            let rest_split = dirichlet_split(&rest, others.len(), spec.alpha, spec.seed, 2)?;
            for (k, v) in labeled.iter().zip(lab_split) {
                assignment[*k] = v;
            }
            for (k, v) in others.iter().zip(rest_split) {
                assignment[*k] = v;
            }
        }
    }

    assignment
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.sort_unstable();
            let fraction = spec.fraction_for(k);
            let n_lab = (fraction * idx.len() as f64).round() as usize;
            let mut r = rng::derived(spec.seed, &[stream::LABEL_SPLIT, k as u64]);
            let mut chosen: Vec<usize> = idx.clone();
            chosen.shuffle(&mut r);
            let mut lab: Vec<usize> = chosen[..n_lab].to_vec();
            lab.sort_unstable();
            let lab_set: BTreeSet<usize> = lab.iter().copied().collect();
            let unl: Vec<usize> = idx.into_iter().filter(|i| !lab_set.contains(i)).collect();
            Ok(ClientDataset {
                client_id: k,
                labeled: LabeledPart {
                    x: lab.iter().map(|&i| ds.x[i].clone()).collect(),
                    y: lab.iter().map(|&i| ds.y[i]).collect(),
                    indices: lab,
                },
                unlabeled: UnlabeledPart {
                    x: unl.iter().map(|&i| ds.x[i].clone()).collect(),
                    indices: unl.clone(),
                },
                hidden: HiddenLabels {
                    labels: unl.iter().map(|&i| ds.y[i]).collect(),
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub p_drop: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            sigma_weak: 0.05,
            sigma_strong: 0.15,
            p_drop: 0.1,
        }
    }
}

/// Weak: additive Gaussian noise. Strong: larger noise, then each coordinate
/// zeroed with probability `p_drop`.
pub fn augment<R: Rng + ?Sized>(
    x: &[f64],
    strength: Strength,
    params: &AugmentParams,
    r: &mut R,
) -> Vec<f64> {
    match strength {
        Strength::Weak => x
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(r);
                v + params.sigma_weak * z
            })
            .collect(),
        Strength::Strong => x
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(r);
                let drop = r.random::<f64>() < params.p_drop;
                if drop {
                    0.0
                } else {
                    v + params.sigma_strong * z
                }
            })
            .collect(),
    }
}

/// A pinned federation: partitioned clients plus the held-out test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedData {
    pub class_count: usize,
    pub feature_dim: usize,
    pub clients: Vec<ClientDataset>,
    pub test: Dataset,
}

impl FederatedData {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let data: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_count;
        for client in &self.clients {
            let dims_ok = client
                .labeled_x()
                .iter()
                .chain(client.unlabeled_x())
                .all(|x| x.len() == self.feature_dim);
            if !dims_ok {
                return Err(Error::Data(format!(
                    "client {} has samples of the wrong dimension",
                    client.client_id()
                )));
            }
            if client.labeled.x.len() != client.labeled.y.len()
                || client.unlabeled.x.len() != client.hidden.labels.len()
            {
                return Err(Error::Data(format!(
                    "client {} has misaligned labels",
                    client.client_id()
                )));
            }
            if client
                .labeled_y()
                .iter()
                .chain(&client.hidden.labels)
                .any(|&l| l >= c)
            {
                return Err(Error::Data(format!(
                    "client {} has a label outside [0, {c})",
                    client.client_id()
                )));
            }
        }
        if self.test.class_count() != c || self.test.feature_dim() != self.feature_dim {
            return Err(Error::Data(
                "test set does not match the federation shape".into(),
            ));
        }
        Ok(())
    }
}
