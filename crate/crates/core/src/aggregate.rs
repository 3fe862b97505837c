//! Server aggregation strategies and the client-side anchor machinery that
//! SemiAnAgg needs.
//!
//! Every client holds a dictionary of unit-normalised features of its
//! unlabeled samples under a fixed random anchor encoder (same seed on every
//! client). Each round it compares those against the received global
//! encoder's features, per pseudo-class, and ships only the per-class mean
//! cosines and counts. The server turns those into diversity weights:
//!
//! * `r_c = 1 - w_c` per client and class,
//! * `r̂_c = r_c / Σ_clients r_c` per class,
//! * `r̂_k = Σ_c r̂_c`, normalised over clients for the unlabeled term.
//!
//! Labeled data is weighted by labeled-sample counts, and the two terms are
//! mixed by `lambda_hat_1` and `lambda_hat_2 = 1 - lambda_hat_1`.

use serde::{Deserialize, Serialize};

use crate::data_sim::ClientDataset;
use crate::error::{Error, Result};
use crate::local_train::{evaluate_unlabeled, ClientUpdate, PseudoLabelAssignment, ThresholdState};
use crate::tensor_net::{self, Architecture, Matrix, ModelParams};

/// Tolerance on the sum of aggregation weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Unit-normalises `v`; zero (or non-finite) vectors have no direction.
pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm.is_finite() && norm >= f64::MIN_POSITIVE {
        Some(v.iter().map(|a| a / norm).collect())
    } else {
        None
    }
}

/// The frozen random encoder shared by all clients.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorModel {
    seed: u64,
    params: ModelParams,
}

impl AnchorModel {
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        Ok(Self {
            seed,
            params: tensor_net::init_params(arch, seed)?,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
}

/// Anchor features of a client's unlabeled samples, in storage order.
/// Samples whose anchor feature is the zero vector are stored as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    pub anchor_seed: u64,
    pub feature_dim: usize,
    pub features: Vec<Option<Vec<f64>>>,
}

impl FeatureDictionary {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn zero_features(&self) -> usize {
        self.features.iter().filter(|f| f.is_none()).count()
    }

    /// Footprint of the stored vectors at `bytes_per_value` per entry.
    pub fn storage_bytes(&self, bytes_per_value: usize) -> usize {
        self.features.len() * self.feature_dim * bytes_per_value
    }
}

pub fn build_anchor_dictionary(
    anchor: &AnchorModel,
    client: &ClientDataset,
) -> Result<FeatureDictionary> {
    let arch = anchor.params.arch();
    let raw = tensor_net::encode(&anchor.params, &Matrix::from_rows(client.unlabeled_x())?)?;
    Ok(FeatureDictionary {
        anchor_seed: anchor.seed,
        feature_dim: arch.feature_dim(),
        features: raw.iter_rows().map(normalize).collect(),
    })
}

/// Per-class mean cosine between anchor and global features, plus the
/// counts the server needs. `w_hat[c]` is `None` when no confident sample
/// landed in class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub client_id: usize,
    pub w_hat: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub n_hat_u: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Confident samples dropped because a feature vector was zero.
    #[serde(default)]
    pub zero_feature_skips: usize,
}

impl SimilarityReport {
    /// Report for a client with nothing to compare (e.g. fully labeled).
    pub fn empty(
        client_id: usize,
        class_count: usize,
        n_labeled: usize,
        n_unlabeled: usize,
    ) -> Self {
        Self {
            client_id,
            w_hat: vec![None; class_count],
            counts: vec![0; class_count],
            n_hat_u: 0,
            n_labeled,
            n_unlabeled,
            zero_feature_skips: 0,
        }
    }

    pub fn class_count(&self) -> usize {
        self.w_hat.len()
    }

    /// Marks every class with data as identical to the anchor (`r_c = 0`).
    pub fn without_diversity(mut self) -> Self {
        for w in self.w_hat.iter_mut().flatten() {
            *w = 1.0;
        }
        self
    }
}

/// Accumulates cosines per pseudo-class.
///
/// `global_raw` are the raw (unnormalised) global-encoder features; only
/// samples with a pseudo-class are used.
pub fn pseudo_aware_similarity(
    anchor: &[Option<Vec<f64>>],
    global_raw: &Matrix,
    assignment: &PseudoLabelAssignment,
    class_count: usize,
) -> Result<(Vec<Option<f64>>, Vec<usize>, usize)> {
    if anchor.len() != assignment.len() || global_raw.rows() != assignment.len() {
        return Err(Error::Alignment(format!(
            "{} dictionary entries, {} feature rows and {} pseudo-labels",
            anchor.len(),
            global_raw.rows(),
            assignment.len()
        )));
    }
    let mut sums = vec![0.0; class_count];
    let mut counts = vec![0usize; class_count];
    let mut skipped = 0;
    for (i, label) in assignment.labels.iter().enumerate() {
        let Some(c) = label.pseudo_class else {
            continue;
        };
        let (Some(q), Some(q_hat)) = (&anchor[i], normalize(global_raw.row(i))) else {
            skipped += 1;
            continue;
        };
        if q.len() != q_hat.len() {
            return Err(Error::Alignment(format!(
                "anchor feature dim {} vs global feature dim {}",
                q.len(),
                q_hat.len()
            )));
        }
        let cos: f64 = q.iter().zip(&q_hat).map(|(a, b)| a * b).sum();
        sums[c] += cos.clamp(-1.0, 1.0);
        counts[c] += 1;
    }
    let w_hat = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    Ok((w_hat, counts, skipped))
}

/// Single un-augmented pass with the frozen received global model.
pub fn compute_similarity_report(
    global_params: &ModelParams,
    client: &ClientDataset,
    dict: &FeatureDictionary,
    state: &ThresholdState,
) -> Result<SimilarityReport> {
    let class_count = global_params.arch().class_count();
    if dict.len() != client.n_unlabeled() {
        return Err(Error::Alignment(format!(
            "client {} has {} unlabeled samples but its dictionary has {}",
            client.client_id(),
            client.n_unlabeled(),
            dict.len()
        )));
    }
    if client.n_unlabeled() == 0 {
        return Ok(SimilarityReport::empty(
            client.client_id(),
            class_count,
            client.n_labeled(),
            0,
        ));
    }
    let (out, assignment) = evaluate_unlabeled(global_params, client, state)?;
    let (w_hat, counts, skipped) =
        pseudo_aware_similarity(&dict.features, &out.features, &assignment, class_count)?;
    Ok(SimilarityReport {
        client_id: client.client_id(),
        n_hat_u: counts.iter().sum(),
        w_hat,
        counts,
        n_labeled: client.n_labeled(),
        n_unlabeled: client.n_unlabeled(),
        zero_feature_skips: skipped,
    })
}

/// Per-parameter convex combination of `params`.
///
/// Computed as `θ_0 + Σ_k w_k (θ_k - θ_0)`, so identical inputs come back
/// bit-for-bit.
pub fn weighted_average(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let Some(first) = params.first() else {
        return Err(Error::Aggregation("nothing to average".into()));
    };
    if params.len() != weights.len() {
        return Err(Error::Aggregation(format!(
            "{} models but {} weights",
            params.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|&&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::Aggregation(format!("invalid weight {w}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Aggregation(format!(
            "weights sum to {sum}, expected 1"
        )));
    }
    for p in params {
        if p.arch().layer_dims() != first.arch().layer_dims() {
            return Err(Error::Shape(
                "models to average have different shapes".into(),
            ));
        }
    }
    let mut out = (*first).clone();
    for (layer_idx, layer) in out.layers_mut().iter_mut().enumerate() {
        let base_w = &first.layers()[layer_idx].weights;
        for (j, v) in layer.weights.iter_mut().enumerate() {
            let delta: f64 = params
                .iter()
                .zip(weights)
                .map(|(p, w)| w * (p.layers()[layer_idx].weights[j] - base_w[j]))
                .sum();
            *v = base_w[j] + delta;
        }
        let base_b = &first.layers()[layer_idx].biases;
        for (j, v) in layer.biases.iter_mut().enumerate() {
            let delta: f64 = params
                .iter()
                .zip(weights)
                .map(|(p, w)| w * (p.layers()[layer_idx].biases[j] - base_b[j]))
                .sum();
            *v = base_b[j] + delta;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedavg_semi")]
    FedAvgSemi,
    #[serde(rename = "semianagg")]
    SemiAnAgg,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedAvgSemi => "fedavg_semi",
            Strategy::SemiAnAgg => "semianagg",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Strategy::FedAvg),
            "fedavg_semi" => Ok(Strategy::FedAvgSemi),
            "semianagg" => Ok(Strategy::SemiAnAgg),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected fedavg, fedavg_semi or semianagg)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Resolved per-client mixing coefficients for one round, aligned with
/// `client_ids` (ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub strategy: Strategy,
    /// Effective supervised/unsupervised mix after degenerate-case handling.
    pub lambda_hat_1: f64,
    pub lambda_hat_2: f64,
    pub client_ids: Vec<usize>,
    pub sup_weights: Vec<f64>,
    pub unsup_weights: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// SemiAnAgg only: `r_c` per client and class (`None` where no data).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub r: Vec<Vec<Option<f64>>>,
    /// SemiAnAgg only: cross-client normalised `r̂_c` per client and class.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub r_hat: Vec<Vec<f64>>,
    /// SemiAnAgg only: `r̂_k`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub r_hat_client: Vec<f64>,
    /// Set when a degenerate case changed the weighting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn check_reports(reports: &[SimilarityReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Aggregation("no client reports".into()));
    }
    let c = reports[0].class_count();
    for r in reports {
        if r.class_count() != c || r.counts.len() != c {
            return Err(Error::Aggregation(format!(
                "report of client {} has inconsistent class count",
                r.client_id
            )));
        }
        if r.counts.iter().sum::<usize>() != r.n_hat_u {
            return Err(Error::Aggregation(format!(
                "report of client {} has class counts not summing to n_hat_u",
                r.client_id
            )));
        }
        for (w, &m) in r.w_hat.iter().zip(&r.counts) {
            match w {
                Some(v) if m == 0 || !(-1.0..=1.0).contains(v) => {
                    return Err(Error::Aggregation(format!(
                        "report of client {} has invalid similarity {v}",
                        r.client_id
                    )))
                }
                None if m > 0 => {
                    return Err(Error::Aggregation(format!(
                        "report of client {} lacks a similarity for a class with data",
                        r.client_id
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn normalized(values: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = values.iter().sum();
    (total > 0.0).then(|| values.iter().map(|v| v / total).collect())
}

/// Mixes the two terms; a missing term hands its mass to the other.
fn mix(
    strategy: Strategy,
    reports: &[SimilarityReport],
    lambda_hat_1: f64,
    sup: Option<Vec<f64>>,
    unsup: Option<Vec<f64>>,
) -> Result<AggregationWeights> {
    if !(0.0..=1.0).contains(&lambda_hat_1) {
        return Err(Error::Config(format!(
            "lambda_hat_1 must be in [0, 1], got {lambda_hat_1}"
        )));
    }
    let k = reports.len();
    let (l1, note) = match (&sup, &unsup) {
        (Some(_), Some(_)) => (lambda_hat_1, None),
        (Some(_), None) => (
            1.0,
            Some("no unlabeled contribution; supervised term only".to_string()),
        ),
        (None, Some(_)) => (
            0.0,
            Some("no labeled data; unsupervised term only".to_string()),
        ),
        (None, None) => {
            return Err(Error::Aggregation(
                "no labeled samples and no confident unlabeled samples".into(),
            ))
        }
    };
    let note = note.filter(|_| l1 != lambda_hat_1);
    let l2 = 1.0 - l1;
    let sup = sup.unwrap_or_else(|| vec![0.0; k]);
    let unsup = unsup.unwrap_or_else(|| vec![0.0; k]);
    let coefficients = sup
        .iter()
        .zip(&unsup)
        .map(|(s, u)| l1 * s + l2 * u)
        .collect();
    Ok(AggregationWeights {
        strategy,
        lambda_hat_1: l1,
        lambda_hat_2: l2,
        client_ids: reports.iter().map(|r| r.client_id).collect(),
        sup_weights: sup,
        unsup_weights: unsup,
        coefficients,
        r: Vec::new(),
        r_hat: Vec::new(),
        r_hat_client: Vec::new(),
        note,
    })
}

fn supervised_term(reports: &[SimilarityReport]) -> Option<Vec<f64>> {
    normalized(
        &reports
            .iter()
            .map(|r| r.n_labeled as f64)
            .collect::<Vec<_>>(),
    )
}

/// Plain FedAvg: weights proportional to total local data.
pub fn fedavg_weights(reports: &[SimilarityReport]) -> Result<AggregationWeights> {
    check_reports(reports)?;
    let sizes: Vec<f64> = reports
        .iter()
        .map(|r| (r.n_labeled + r.n_unlabeled) as f64)
        .collect();
    let w = normalized(&sizes).ok_or_else(|| Error::Aggregation("all clients are empty".into()))?;
    let mut out = mix(Strategy::FedAvg, reports, 1.0, Some(w), None)?;
    out.note = None;
    Ok(out)
}

/// Labeled data weighted by `N^L`, unlabeled data by confident counts.
pub fn fedavg_semi_weights(
    reports: &[SimilarityReport],
    lambda_hat_1: f64,
) -> Result<AggregationWeights> {
    check_reports(reports)?;
    let unsup = normalized(&reports.iter().map(|r| r.n_hat_u as f64).collect::<Vec<_>>());
    mix(
        Strategy::FedAvgSemi,
        reports,
        lambda_hat_1,
        supervised_term(reports),
        unsup,
    )
}

/// Labeled data weighted by `N^L`, unlabeled data by anchor diversity.
pub fn semianagg_weights(
    reports: &[SimilarityReport],
    lambda_hat_1: f64,
) -> Result<AggregationWeights> {
    check_reports(reports)?;
    let k = reports.len();
    let c = reports[0].class_count();

    let r: Vec<Vec<Option<f64>>> = reports
        .iter()
        .map(|rep| rep.w_hat.iter().map(|w| w.map(|w| 1.0 - w)).collect())
        .collect();
    let mut r_hat = vec![vec![0.0; c]; k];
    for class in 0..c {
        let denom: f64 = r.iter().filter_map(|row| row[class]).sum();
        if denom > 0.0 {
            for (client, row) in r.iter().enumerate() {
                if let Some(v) = row[class] {
                    r_hat[client][class] = v / denom;
                }
            }
        }
    }
    let r_hat_client: Vec<f64> = r_hat.iter().map(|row| row.iter().sum()).collect();

    let mut fallback = None;
    let unsup = match normalized(&r_hat_client) {
        Some(w) => Some(w),
        None => {
            let has_data: Vec<f64> = reports
                .iter()
                .map(|rep| if rep.n_hat_u > 0 { 1.0 } else { 0.0 })
                .collect();
            let uniform = normalized(&has_data);
            if uniform.is_some() {
                fallback = Some(
                    "zero total diversity; uniform over clients with confident samples".to_string(),
                );
            }
            uniform
        }
    };
    let mut out = mix(
        Strategy::SemiAnAgg,
        reports,
        lambda_hat_1,
        supervised_term(reports),
        unsup,
    )?;
    out.r = r;
    out.r_hat = r_hat;
    out.r_hat_client = r_hat_client;
    if fallback.is_some() {
        out.note = fallback;
    }
    Ok(out)
}

pub fn resolve_weights(
    reports: &[SimilarityReport],
    strategy: Strategy,
    lambda_hat_1: f64,
) -> Result<AggregationWeights> {
    match strategy {
        Strategy::FedAvg => fedavg_weights(reports),
        Strategy::FedAvgSemi => fedavg_semi_weights(reports, lambda_hat_1),
        Strategy::SemiAnAgg => semianagg_weights(reports, lambda_hat_1),
    }
}

/// Aggregates client updates in ascending `client_id` order, whatever order
/// they arrived in.
pub fn aggregate_round(
    updates: &[ClientUpdate],
    strategy: Strategy,
    lambda_hat_1: f64,
) -> Result<(ModelParams, AggregationWeights)> {
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    if ordered.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Aggregation("duplicate client id in round".into()));
    }
    let reports: Vec<SimilarityReport> = ordered.iter().map(|u| u.report.clone()).collect();
    let weights = resolve_weights(&reports, strategy, lambda_hat_1)?;
    let params: Vec<&ModelParams> = ordered.iter().map(|u| &u.params).collect();
    let global = weighted_average(&params, &weights.coefficients)?;
    Ok((global, weights))
}
