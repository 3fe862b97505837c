//! Client-side training for one federated round.
//!
//! Labeled samples contribute a supervised cross-entropy term (optionally
//! logit-adjusted); unlabeled samples contribute a pseudo-label term in the
//! FlexMatch style: pseudo-labels come from a weak view under the current
//! local model and class-adaptive thresholds, and the loss is taken on a
//! strong view. The two terms are mixed as `lambda_sup * sup + lambda_unsup *
//! unsup`, with `lambda_sup` forced to zero on clients without labels.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::SimilarityReport;
use crate::data_sim::{augment, AugmentParams, ClientDataset, Strength};
use crate::error::{Error, Result};
use crate::tensor_net::{self, ForwardOutput, Gradient, Matrix, ModelParams};

/// How per-class thresholds derive from the base threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Class-adaptive: `tau_c = beta_c * tau`.
    #[default]
    Flex,
    /// Every class uses the base threshold (FixMatch-style).
    Fixed,
}

/// Class-adaptive confidence thresholds.
///
/// `beta_c = sigma_c / max(max_c' sigma_c', unused_count)` and
/// `tau_c = beta_c * base_tau`; a zero denominator gives `beta_c = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    base_tau: f64,
    sigma: Vec<usize>,
    unused_count: usize,
    #[serde(default)]
    mode: ThresholdMode,
}

impl ThresholdState {
    /// Fresh state: nothing learned yet, every unlabeled sample unused.
    pub fn new(class_count: usize, base_tau: f64, n_unlabeled: usize) -> Result<Self> {
        Self::from_counts(base_tau, vec![0; class_count], n_unlabeled)
    }

    pub fn from_counts(base_tau: f64, sigma: Vec<usize>, unused_count: usize) -> Result<Self> {
        if !(base_tau > 0.0 && base_tau <= 1.0) {
            return Err(Error::Config(format!(
                "confidence threshold must be in (0, 1], got {base_tau}"
            )));
        }
        if sigma.is_empty() {
            return Err(Error::Config(
                "threshold state needs at least one class".into(),
            ));
        }
        Ok(Self {
            base_tau,
            sigma,
            unused_count,
            mode: ThresholdMode::Flex,
        })
    }

    pub fn with_mode(mut self, mode: ThresholdMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn base_tau(&self) -> f64 {
        self.base_tau
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    pub fn unused_count(&self) -> usize {
        self.unused_count
    }

    pub fn mode(&self) -> ThresholdMode {
        self.mode
    }

    pub fn class_count(&self) -> usize {
        self.sigma.len()
    }

    pub fn beta(&self) -> Vec<f64> {
        let max_sigma = self.sigma.iter().copied().max().unwrap_or(0);
        let denom = max_sigma.max(self.unused_count);
        self.sigma
            .iter()
            .map(|&s| {
                if denom == 0 {
                    0.0
                } else {
                    s as f64 / denom as f64
                }
            })
            .collect()
    }

    pub fn class_thresholds(&self) -> Vec<f64> {
        match self.mode {
            ThresholdMode::Fixed => vec![self.base_tau; self.sigma.len()],
            ThresholdMode::Flex => self.beta().into_iter().map(|b| b * self.base_tau).collect(),
        }
    }
}

/// Outcome for one unlabeled sample. `pseudo_class` is `None` (written as
/// `-1` on the wire) when the confidence does not clear its class threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub argmax: usize,
    pub confidence: f64,
    pub pseudo_class: Option<usize>,
}

impl PseudoLabel {
    pub fn as_signed(&self) -> i64 {
        self.pseudo_class.map_or(-1, |c| c as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelAssignment {
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn confident_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| l.pseudo_class.is_some())
            .count()
    }

    /// Targets and mask for a masked cross-entropy; ignored samples get
    /// target 0 with the mask off.
    pub fn targets_and_mask(&self) -> (Vec<usize>, Vec<bool>) {
        self.labels
            .iter()
            .map(|l| (l.pseudo_class.unwrap_or(0), l.pseudo_class.is_some()))
            .unzip()
    }
}

/// Recounts `sigma` and `unused_count` against the base threshold from the
/// latest assignments. An empty batch leaves the state unchanged.
pub fn update_thresholds(
    state: &ThresholdState,
    assignments: &PseudoLabelAssignment,
) -> ThresholdState {
    if assignments.is_empty() {
        return state.clone();
    }
    let mut sigma = vec![0; state.class_count()];
    let mut unused = 0;
    for l in &assignments.labels {
        if l.confidence > state.base_tau {
            sigma[l.argmax] += 1;
        } else {
            unused += 1;
        }
    }
    ThresholdState {
        base_tau: state.base_tau,
        sigma,
        unused_count: unused,
        mode: state.mode,
    }
}

/// Thresholds a batch of logits. Argmax ties resolve to the lowest class.
pub fn assign_from_logits(logits: &Matrix, state: &ThresholdState) -> PseudoLabelAssignment {
    let thresholds = state.class_thresholds();
    let labels = logits
        .iter_rows()
        .map(|row| {
            let p = tensor_net::softmax(row, None);
            let (argmax, confidence) =
                p.iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, v)| {
                        if v > best.1 {
                            (k, v)
                        } else {
                            best
                        }
                    });
            let pseudo_class = (confidence > thresholds[argmax]).then_some(argmax);
            PseudoLabel {
                argmax,
                confidence,
                pseudo_class,
            }
        })
        .collect();
    PseudoLabelAssignment { labels }
}

/// Pseudo-labels from weakly augmented views of `inputs`.
pub fn assign_pseudo_labels<R: Rng + ?Sized>(
    params: &ModelParams,
    inputs: &[Vec<f64>],
    state: &ThresholdState,
    augment_params: &AugmentParams,
    weak_rng: &mut R,
) -> Result<PseudoLabelAssignment> {
    if inputs.is_empty() {
        return Err(Error::Data("cannot pseudo-label an empty batch".into()));
    }
    let views: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| augment(x, Strength::Weak, augment_params, weak_rng))
        .collect();
    let out = tensor_net::forward(params, &Matrix::from_rows(&views)?)?;
    Ok(assign_from_logits(&out.logits, state))
}

/// Un-augmented pass over a client's unlabeled data with a frozen model.
/// The same pass feeds both the confident-sample count and the similarity
/// report.
pub fn evaluate_unlabeled(
    params: &ModelParams,
    client: &ClientDataset,
    state: &ThresholdState,
) -> Result<(ForwardOutput, PseudoLabelAssignment)> {
    let out = tensor_net::forward(params, &Matrix::from_rows(client.unlabeled_x())?)?;
    let assignment = assign_from_logits(&out.logits, state);
    Ok((out, assignment))
}

/// `offsets_c = tau_la * ln(prior_c)`.
pub fn logit_adjust_offsets(class_prior: &[f64], tau_la: f64) -> Result<Vec<f64>> {
    if !(tau_la >= 0.0 && tau_la.is_finite()) {
        return Err(Error::Config(format!(
            "logit adjustment tau must be non-negative, got {tau_la}"
        )));
    }
    let sum: f64 = class_prior.iter().sum();
    if class_prior.is_empty() || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "class prior sums to {sum}, expected 1"
        )));
    }
    if let Some(p) = class_prior.iter().find(|&&p| p.is_nan() || p <= 0.0) {
        return Err(Error::Config(format!(
            "class prior entry {p} is not positive"
        )));
    }
    Ok(class_prior.iter().map(|p| tau_la * p.ln()).collect())
}

/// Label histogram with add-one smoothing, normalised to a distribution.
pub fn smoothed_label_prior(labels: &[usize], class_count: usize) -> Vec<f64> {
    let mut counts = vec![1.0; class_count];
    for &l in labels {
        counts[l] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_labeled: f64,
    pub lr_unlabeled: f64,
    pub lambda_sup: f64,
    pub lambda_unsup: f64,
    pub weight_decay: f64,
    pub decay_head: bool,
    /// 0 disables logit adjustment.
    pub logit_adjust_tau: f64,
    /// Prior for logit adjustment. When absent each labeled client uses its
    /// own smoothed label histogram.
    pub class_prior: Option<Vec<f64>>,
    pub confidence_threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub augment: AugmentParams,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 64,
            lr_labeled: 0.03,
            lr_unlabeled: 0.02,
            lambda_sup: 1.0,
            lambda_unsup: 1.0,
            weight_decay: 5e-4,
            decay_head: false,
            logit_adjust_tau: 0.0,
            class_prior: None,
            confidence_threshold: 0.95,
            threshold_mode: ThresholdMode::Flex,
            augment: AugmentParams::default(),
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr_labeled", self.lr_labeled),
            ("lr_unlabeled", self.lr_unlabeled),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_sup", self.lambda_sup),
            ("lambda_unsup", self.lambda_unsup),
            ("weight_decay", self.weight_decay),
            ("logit_adjust_tau", self.logit_adjust_tau),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "confidence_threshold must be in (0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if let Some(prior) = &self.class_prior {
            logit_adjust_offsets(prior, self.logit_adjust_tau)?;
        }
        Ok(())
    }

    pub fn initial_thresholds(
        &self,
        class_count: usize,
        n_unlabeled: usize,
    ) -> Result<ThresholdState> {
        Ok(
            ThresholdState::new(class_count, self.confidence_threshold, n_unlabeled)?
                .with_mode(self.threshold_mode),
        )
    }

    /// Offsets used by `client`'s supervised term, if logit adjustment is on.
    pub fn offsets_for(
        &self,
        client: &ClientDataset,
        class_count: usize,
    ) -> Result<Option<Vec<f64>>> {
        if self.logit_adjust_tau == 0.0 || client.n_labeled() == 0 {
            return Ok(None);
        }
        let prior = match &self.class_prior {
            Some(p) => p.clone(),
            None => smoothed_label_prior(client.labeled_y(), class_count),
        };
        logit_adjust_offsets(&prior, self.logit_adjust_tau).map(Some)
    }
}

/// Loss split of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub sup: f64,
    pub unsup: f64,
    pub total: f64,
}

/// Supervised batch for [`step_objective`].
pub struct SupBatch<'a> {
    pub inputs: &'a Matrix,
    pub targets: &'a [usize],
    pub offsets: Option<&'a [f64]>,
}

/// Pseudo-labeled batch for [`step_objective`]; masked-out samples are
/// ignored pseudo-labels.
pub struct UnsupBatch<'a> {
    pub inputs: &'a Matrix,
    pub targets: &'a [usize],
    pub mask: &'a [bool],
}

/// `lambda_sup * L_sup + lambda_unsup * L_unsup` and its gradient. A term with
/// a zero coefficient or a missing batch is skipped entirely.
pub fn step_objective(
    params: &ModelParams,
    sup: Option<SupBatch<'_>>,
    unsup: Option<UnsupBatch<'_>>,
    lambda_sup: f64,
    lambda_unsup: f64,
) -> Result<(StepLoss, Gradient)> {
    let mut grad = Gradient::zeros(params.arch());
    let mut loss = StepLoss {
        sup: 0.0,
        unsup: 0.0,
        total: 0.0,
    };
    if let Some(b) = sup.filter(|_| lambda_sup > 0.0) {
        let mask = vec![true; b.targets.len()];
        let (l, g) = tensor_net::loss_and_grad(params, b.inputs, b.targets, &mask, b.offsets)?;
        loss.sup = l;
        grad.add_scaled(&g, lambda_sup)?;
    }
    if let Some(b) = unsup.filter(|_| lambda_unsup > 0.0) {
        let (l, g) = tensor_net::loss_and_grad(params, b.inputs, b.targets, b.mask, None)?;
        loss.unsup = l;
        grad.add_scaled(&g, lambda_unsup)?;
    }
    loss.total = lambda_sup * loss.sup + lambda_unsup * loss.unsup;
    Ok((loss, grad))
}

/// One recorded SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: StepLoss,
    pub pseudo_labeled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRoundOutput {
    pub params: ModelParams,
    pub state: ThresholdState,
    /// Confident unlabeled samples in the round-start pass with the received
    /// global model.
    pub n_hat_u: usize,
    pub steps: Vec<StepRecord>,
}

/// What a client sends back after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub report: SimilarityReport,
    pub n_labeled: usize,
    pub n_hat_u: usize,
}

fn batch_positions(step: usize, batch: usize, n: usize, driver: bool) -> Vec<usize> {
    if driver {
        (step * batch..((step + 1) * batch).min(n)).collect()
    } else {
        (0..batch.min(n)).map(|j| (step * batch + j) % n).collect()
    }
}

fn gather(rows: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| rows[i].clone()).collect()
}

/// Runs `cfg.epochs` local epochs starting from `global_params`.
///
/// Each epoch shuffles both sample pools and takes
/// `ceil(max(N^L, N^U) / batch_size)` steps; the larger pool is walked once
/// and the smaller one cycles. Thresholds are refreshed at each epoch end
/// from the latest pseudo-label of every unlabeled sample. A non-finite loss
/// aborts the round with a numerical error.
pub fn train_local_round<R: Rng + ?Sized>(
    client: &ClientDataset,
    global_params: &ModelParams,
    cfg: &LocalTrainConfig,
    state: &ThresholdState,
    rng: &mut R,
) -> Result<LocalRoundOutput> {
    cfg.validate()?;
    if !global_params.is_finite() {
        return Err(Error::Numerical(
            "received non-finite global parameters".into(),
        ));
    }
    let class_count = global_params.arch().class_count();
    let n_lab = client.n_labeled();
    let n_unl = client.n_unlabeled();

    let n_hat_u = if n_unl > 0 {
        evaluate_unlabeled(global_params, client, state)?
            .1
            .confident_count()
    } else {
        0
    };

    let lambda_sup = if n_lab > 0 { cfg.lambda_sup } else { 0.0 };
    let lambda_unsup = if n_unl > 0 { cfg.lambda_unsup } else { 0.0 };
    let lr = if n_lab > 0 {
        cfg.lr_labeled
    } else {
        cfg.lr_unlabeled
    };
    let offsets = cfg.offsets_for(client, class_count)?;

    let mut params = global_params.clone();
    let mut state = state.clone();
    let mut steps = Vec::new();
    let n_max = n_lab.max(n_unl);
    let n_steps = n_max.div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let mut lab_order: Vec<usize> = (0..n_lab).collect();
        lab_order.shuffle(rng);
        let mut unl_order: Vec<usize> = (0..n_unl).collect();
        unl_order.shuffle(rng);
        let mut latest: Vec<Option<PseudoLabel>> = vec![None; n_unl];

        for step in 0..n_steps {
            let sup_inputs;
            let sup_targets: Vec<usize>;
            let sup = if n_lab > 0 && lambda_sup > 0.0 {
                let idx: Vec<usize> = batch_positions(step, cfg.batch_size, n_lab, n_lab == n_max)
                    .into_iter()
                    .map(|p| lab_order[p])
                    .collect();
                sup_inputs = Matrix::from_rows(&gather(client.labeled_x(), &idx))?;
                sup_targets = idx.iter().map(|&i| client.labeled_y()[i]).collect();
                Some(SupBatch {
                    inputs: &sup_inputs,
                    targets: &sup_targets,
                    offsets: offsets.as_deref(),
                })
            } else {
                None
            };

            let strong_inputs;
            let unsup_targets: Vec<usize>;
            let unsup_mask: Vec<bool>;
            let mut pseudo_labeled = 0;
            let unsup = if n_unl > 0 && lambda_unsup > 0.0 {
                let idx: Vec<usize> = batch_positions(step, cfg.batch_size, n_unl, n_unl == n_max)
                    .into_iter()
                    .map(|p| unl_order[p])
                    .collect();
                let raw = gather(client.unlabeled_x(), &idx);
                let assignment = assign_pseudo_labels(&params, &raw, &state, &cfg.augment, rng)?;
                for (&i, l) in idx.iter().zip(&assignment.labels) {
                    latest[i] = Some(*l);
                }
                pseudo_labeled = assignment.confident_count();
                let strong: Vec<Vec<f64>> = raw
                    .iter()
                    .map(|x| augment(x, Strength::Strong, &cfg.augment, rng))
                    .collect();
                strong_inputs = Matrix::from_rows(&strong)?;
                (unsup_targets, unsup_mask) = assignment.targets_and_mask();
                Some(UnsupBatch {
                    inputs: &strong_inputs,
                    targets: &unsup_targets,
                    mask: &unsup_mask,
                })
            } else {
                None
            };

            if sup.is_none() && unsup.is_none() {
                continue;
            }
            let (loss, grad) = step_objective(&params, sup, unsup, lambda_sup, lambda_unsup)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "client {} hit a non-finite loss in epoch {epoch}",
                    client.client_id()
                )));
            }
            params = tensor_net::sgd_step(&params, &grad, lr, cfg.weight_decay, cfg.decay_head)?;
            steps.push(StepRecord {
                epoch,
                lr,
                loss,
                pseudo_labeled,
            });
        }

        let seen = PseudoLabelAssignment {
            labels: latest.into_iter().flatten().collect(),
        };
        state = update_thresholds(&state, &seen);
    }

    Ok(LocalRoundOutput {
        params,
        state,
        n_hat_u,
        steps,
    })
}
