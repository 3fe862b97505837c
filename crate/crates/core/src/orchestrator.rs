//! Federation driver: configuration, warm-up, FedSemi rounds, evaluation,
//! persistence, leave-one-out valuation and parameter sweeps.
//!
//! Rounds follow a barrier: every client finishes round `t` before the
//! server aggregates it. Client work inside a round runs on a rayon pool
//! (`FEDSEMI_THREADS`, 0 or unset = all cores); each client draws from its
//! own `(master seed, client id, round)` stream and results are collected in
//! client order, so outputs do not depend on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    aggregate_round, build_anchor_dictionary, compute_similarity_report, AggregationWeights,
    AnchorModel, FeatureDictionary, SimilarityReport, Strategy,
};
use crate::data_sim::{
    dirichlet_partition, make_imbalanced_counts, oracle, ClientDataset, FederatedData,
    GaussianMixture, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::local_train::{
    evaluate_unlabeled, train_local_round, ClientUpdate, LocalTrainConfig, ThresholdState,
};
use crate::metrics::{self, EvalMetrics};
use crate::rng::{self, stream};
use crate::tensor_net::{self, Architecture, ModelParams};

pub const THREADS_ENV: &str = "FEDSEMI_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian mixture with an optional exponential long tail.
    Mixture {
        classes: usize,
        dim: usize,
        /// Size of the largest class. Exactly one of `n_max` and `total`.
        #[serde(default)]
        n_max: Option<usize>,
        /// Approximate dataset size; `n_max` is derived from it.
        #[serde(default)]
        total: Option<usize>,
        #[serde(default = "one")]
        imbalance_factor: f64,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// A partition previously written by the `partition` command.
    Pinned { path: PathBuf },
}

fn one() -> f64 {
    1.0
}

fn default_spread() -> f64 {
    0.3
}

fn default_test_per_class() -> usize {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub labeled_client_ids: Vec<usize>,
    #[serde(default)]
    pub label_fraction: Option<Vec<f64>>,
    #[serde(default)]
    pub labeled_share: Option<f64>,
    /// Derived from the master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_alpha() -> f64 {
    0.8
}

impl PartitionConfig {
    pub fn to_spec(&self, master_seed: u64) -> PartitionSpec {
        PartitionSpec {
            clients: self.clients,
            alpha: self.alpha,
            labeled_client_ids: self.labeled_client_ids.clone(),
            label_fraction: self.label_fraction.clone(),
            labeled_share: self.labeled_share,
            seed: self
                .seed
                .unwrap_or_else(|| rng::derive_seed(master_seed, &[stream::PARTITION])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    /// Number of encoder layers; defaults to all but the final layer.
    #[serde(default)]
    pub encoder_split: Option<usize>,
}

impl ArchConfig {
    pub fn build(&self, input_dim: usize, class_count: usize) -> Result<Architecture> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(class_count);
        match self.encoder_split {
            Some(s) => Architecture::new(dims, s),
            None => Architecture::with_default_split(dims),
        }
    }
}

/// Per-round `lambda_hat_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LambdaSchedule {
    Constant {
        value: f64,
    },
    /// Linear ramp over the FedSemi rounds.
    Linear {
        start: f64,
        end: f64,
    },
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Constant { value: 0.5 }
    }
}

impl LambdaSchedule {
    /// Value for FedSemi round `r` (1-based) out of `total`.
    pub fn at(&self, r: usize, total: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant { value } => value,
            LambdaSchedule::Linear { start, end } => {
                let span = total.saturating_sub(1).max(1) as f64;
                start + (end - start) * (r.saturating_sub(1)) as f64 / span
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        let valid = match *self {
            LambdaSchedule::Constant { value } => ok(value),
            LambdaSchedule::Linear { start, end } => ok(start) && ok(end),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::Config(
                "lambda schedule values must lie in [0, 1]".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Master seed; every unset seed below is derived from it.
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub architecture: ArchConfig,
    #[serde(default)]
    pub anchor_seed: Option<u64>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub lambda_schedule: LambdaSchedule,
    #[serde(default = "default_warmup")]
    pub warmup_rounds: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub local: LocalTrainConfig,
    /// Evaluate every `eval_every` rounds of each phase.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "yes")]
    pub evaluate_warmup: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_strategy() -> Strategy {
    Strategy::SemiAnAgg
}

fn default_warmup() -> usize {
    20
}

fn default_rounds() -> usize {
    100
}

fn default_eval_every() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// Reads a JSON config. A relative pinned-partition path is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let value = read_config_value(path)?;
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.lambda_schedule.validate()?;
        self.local.validate()?;
        if let DataConfig::Mixture { n_max, total, .. } = &self.data {
            if n_max.is_some() == total.is_some() {
                return Err(Error::Config(
                    "mixture data needs exactly one of n_max and total".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn anchor_seed(&self) -> u64 {
        self.anchor_seed
            .unwrap_or_else(|| rng::derive_seed(self.seed, &[stream::ANCHOR]))
    }

    pub fn init_seed(&self) -> u64 {
        rng::derive_seed(self.seed, &[stream::INIT])
    }

    pub fn lambda_hat_1(&self, fedsemi_round: usize) -> f64 {
        self.lambda_schedule.at(fedsemi_round, self.rounds)
    }
}

/// Raw JSON of a config file, with a relative pinned-partition path made
/// relative to the file's directory. Useful for editing before parsing.
pub fn read_config_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    if let Some(data) = value.get_mut("data").and_then(|d| d.as_object_mut()) {
        if data.get("kind").and_then(|k| k.as_str()) == Some("pinned") {
            if let Some(p) = data.get("path").and_then(|p| p.as_str()) {
                if Path::new(p).is_relative() {
                    let joined = dir.join(p).to_string_lossy().into_owned();
                    data.insert("path".into(), joined.into());
                }
            }
        }
    }
    Ok(value)
}

/// Materialises the clients and test set described by `cfg`.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<FederatedData> {
    match &cfg.data {
        DataConfig::Pinned { path } => FederatedData::load(path),
        DataConfig::Mixture {
            classes,
            dim,
            n_max,
            total,
            imbalance_factor,
            spread,
            test_per_class,
            seed,
        } => {
            let data_seed = seed.unwrap_or_else(|| rng::derive_seed(cfg.seed, &[stream::DATA]));
            let n_max = match (n_max, total) {
                (Some(n), None) => *n,
                (None, Some(t)) => {
                    let shape: f64 = (0..*classes)
                        .map(|c| {
                            if *classes == 1 {
                                1.0
                            } else {
                                imbalance_factor.powf(-(c as f64) / (*classes - 1) as f64)
                            }
                        })
                        .sum();
                    (*t as f64 / shape).round() as usize
                }
                _ => return Err(Error::Config("need exactly one of n_max and total".into())),
            };
            let counts = make_imbalanced_counts(*classes, n_max, *imbalance_factor)?;
            let mixture = GaussianMixture::new(*classes, *dim, *spread, data_seed)?;
            let train = mixture.sample(&counts, 0)?;
            let test = mixture.sample(&vec![*test_per_class; *classes], stream::TEST_SET)?;
            let clients = dirichlet_partition(&train, &cfg.partition.to_spec(cfg.seed))?;
            Ok(FederatedData {
                class_count: *classes,
                feature_dim: *dim,
                clients,
                test,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Fedsemi,
}

/// One evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub phase: Phase,
    pub metrics: EvalMetrics,
    pub client_ids: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub unsup_weights: Vec<f64>,
    pub n_hat_u: Vec<usize>,
    /// Accuracy of the global model's confident pseudo-labels on each
    /// client's unlabeled data; `None` when nothing was confident.
    pub pseudo_label_accuracy: Vec<Option<f64>>,
}

/// Everything the server saw and decided in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub phase: Phase,
    /// Scheduled value before degenerate-case handling.
    pub lambda_hat_1: f64,
    pub reports: Vec<SimilarityReport>,
    pub weights: AggregationWeights,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diverged_clients: Vec<usize>,
}

/// Mutable federation state between rounds.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub global: ModelParams,
    pub thresholds: Vec<ThresholdState>,
    pub dictionaries: Vec<FeatureDictionary>,
    pub round: usize,
    pub metrics: Vec<MetricsRecord>,
    pub logs: Vec<RoundLog>,
}

/// Run-time knobs that do not affect results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; `None` reads `FEDSEMI_THREADS`.
    pub threads: Option<usize>,
}

impl RunOptions {
    pub fn with_threads(threads: usize) -> Self {
        Self {
            threads: Some(threads),
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let n = match self.threads {
            Some(n) => n,
            None => match std::env::var(THREADS_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not an integer")))?,
                Err(_) => 0,
            },
        };
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
    }
}

/// A configured federation over fixed data.
pub struct Simulation {
    cfg: ExperimentConfig,
    data: FederatedData,
    arch: Architecture,
    pool: rayon::ThreadPool,
    state: FederationState,
}

struct ClientOutcome {
    update: ClientUpdate,
    state: ThresholdState,
    diverged: bool,
}

impl Simulation {
    /// Builds the anchor dictionaries and the initial global model.
    pub fn new(cfg: ExperimentConfig, data: FederatedData, options: RunOptions) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        if data.clients.is_empty() {
            return Err(Error::Config("federation has no clients".into()));
        }
        let mut ids: Vec<usize> = data.clients.iter().map(|c| c.client_id()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("client ids must be unique".into()));
        }
        if cfg.warmup_rounds > 0 && data.clients.iter().all(|c| c.n_labeled() == 0) {
            return Err(Error::Config(
                "warm-up needs at least one labeled client".into(),
            ));
        }
        let arch = cfg.architecture.build(data.feature_dim, data.class_count)?;
        let mut clients = data.clients.clone();
        clients.sort_by_key(|c| c.client_id());
        let data = FederatedData { clients, ..data };

        let pool = options.pool()?;
        let anchor = AnchorModel::new(&arch, cfg.anchor_seed())?;
        let dictionaries = pool.install(|| {
            data.clients
                .par_iter()
                .map(|c| build_anchor_dictionary(&anchor, c))
                .collect::<Result<Vec<_>>>()
        })?;
        let thresholds = data
            .clients
            .iter()
            .map(|c| {
                cfg.local
                    .initial_thresholds(data.class_count, c.n_unlabeled())
            })
            .collect::<Result<Vec<_>>>()?;
        let global = tensor_net::init_params(&arch, cfg.init_seed())?;
        Ok(Self {
            state: FederationState {
                global,
                thresholds,
                dictionaries,
                round: 0,
                metrics: Vec::new(),
                logs: Vec::new(),
            },
            cfg,
            data,
            arch,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &FederatedData {
        &self.data
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn into_state(self) -> FederationState {
        self.state
    }

    /// Switches the aggregation strategy for later rounds. Warm-up does not
    /// depend on the strategy, so a warmed-up simulation can be forked.
    pub fn set_strategy(&mut self, strategy: Strategy) {
        self.cfg.strategy = strategy;
    }

    pub fn fork(&self, options: RunOptions) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            data: self.data.clone(),
            arch: self.arch.clone(),
            pool: options.pool()?,
            state: self.state.clone(),
        })
    }

    /// Labeled-only rounds aggregated by labeled-sample counts.
    pub fn run_warmup(&mut self) -> Result<()> {
        let mut local = self.cfg.local.clone();
        local.lambda_unsup = 0.0;
        for t in 1..=self.cfg.warmup_rounds {
            self.step(t, Phase::Warmup, &local, Strategy::FedAvgSemi, 1.0)?;
        }
        Ok(())
    }

    /// One FedSemi round; `fedsemi_round` is 1-based.
    pub fn run_round(&mut self, fedsemi_round: usize) -> Result<()> {
        let t = self.cfg.warmup_rounds + fedsemi_round;
        let lambda = self.cfg.lambda_hat_1(fedsemi_round);
        let local = self.cfg.local.clone();
        self.step(t, Phase::Fedsemi, &local, self.cfg.strategy, lambda)
    }

    pub fn run_fedsemi(&mut self) -> Result<()> {
        for r in 1..=self.cfg.rounds {
            self.run_round(r)?;
        }
        Ok(())
    }

    fn client_round(
        &self,
        idx: usize,
        t: usize,
        phase: Phase,
        local: &LocalTrainConfig,
    ) -> Result<ClientOutcome> {
        let client = &self.data.clients[idx];
        let global = &self.state.global;
        let threshold = &self.state.thresholds[idx];
        let class_count = self.data.class_count;
        let passive = phase == Phase::Warmup && client.n_labeled() == 0;
        let report = if phase == Phase::Warmup || client.n_unlabeled() == 0 {
            SimilarityReport::empty(
                client.client_id(),
                class_count,
                client.n_labeled(),
                client.n_unlabeled(),
            )
        } else {
            compute_similarity_report(global, client, &self.state.dictionaries[idx], threshold)?
        };
        let pass_through = |report: SimilarityReport| ClientOutcome {
            update: ClientUpdate {
                client_id: client.client_id(),
                params: global.clone(),
                n_labeled: client.n_labeled(),
                n_hat_u: report.n_hat_u,
                report,
            },
            state: threshold.clone(),
            diverged: false,
        };
        if passive {
            return Ok(pass_through(report));
        }
        let mut r = rng::client_round_rng(self.cfg.seed, client.client_id(), t);
        match train_local_round(client, global, local, threshold, &mut r) {
            Ok(out) => Ok(ClientOutcome {
                update: ClientUpdate {
                    client_id: client.client_id(),
                    params: out.params,
                    n_labeled: client.n_labeled(),
                    n_hat_u: report.n_hat_u,
                    report,
                },
                state: out.state,
                diverged: false,
            }),
            Err(Error::Numerical(msg)) => {
                eprintln!(
                    "round {t}: client {} diverged ({msg}); passing the global model through",
                    client.client_id()
                );
                let mut o = pass_through(report.without_diversity());
                o.diverged = true;
                Ok(o)
            }
            Err(e) => Err(e),
        }
    }

    fn step(
        &mut self,
        t: usize,
        phase: Phase,
        local: &LocalTrainConfig,
        strategy: Strategy,
        lambda_hat_1: f64,
    ) -> Result<()> {
        let n = self.data.clients.len();
        let this = &*self;
        let outcomes = self.pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|i| this.client_round(i, t, phase, local))
                .collect::<Result<Vec<_>>>()
        })?;
        let diverged_clients = outcomes
            .iter()
            .filter(|o| o.diverged)
            .map(|o| o.update.client_id)
            .collect();
        let (updates, states): (Vec<ClientUpdate>, Vec<ThresholdState>) =
            outcomes.into_iter().map(|o| (o.update, o.state)).unzip();
        let (global, weights) = aggregate_round(&updates, strategy, lambda_hat_1)?;
        if !global.is_finite() {
            return Err(Error::Numerical(format!(
                "round {t} produced a non-finite global model"
            )));
        }
        self.state.global = global;
        self.state.thresholds = states;
        self.state.round = t;
        let log = RoundLog {
            round: t,
            phase,
            lambda_hat_1,
            reports: updates.into_iter().map(|u| u.report).collect(),
            weights,
            diverged_clients,
        };

        let phase_round = match phase {
            Phase::Warmup => t,
            Phase::Fedsemi => t - self.cfg.warmup_rounds,
        };
        let evaluate = phase_round % self.cfg.eval_every == 0
            && (phase == Phase::Fedsemi || self.cfg.evaluate_warmup);
        if evaluate {
            let record = self.evaluate_round(&log)?;
            self.state.metrics.push(record);
        }
        self.state.logs.push(log);
        Ok(())
    }

    fn evaluate_round(&self, log: &RoundLog) -> Result<MetricsRecord> {
        let metrics = metrics::evaluate(&self.state.global, &self.data.test)?;
        let this = self;
        let pseudo_label_accuracy = self.pool.install(|| {
            (0..this.data.clients.len())
                .into_par_iter()
                .map(|i| this.pseudo_label_accuracy(i))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(MetricsRecord {
            round: log.round,
            phase: log.phase,
            metrics,
            client_ids: log.weights.client_ids.clone(),
            coefficients: log.weights.coefficients.clone(),
            unsup_weights: log.weights.unsup_weights.clone(),
            n_hat_u: log.reports.iter().map(|r| r.n_hat_u).collect(),
            pseudo_label_accuracy,
        })
    }

    /// Evaluation-only: compares the current global model's confident
    /// pseudo-labels with the hidden true labels.
    fn pseudo_label_accuracy(&self, idx: usize) -> Result<Option<f64>> {
        let client = &self.data.clients[idx];
        if client.n_unlabeled() == 0 {
            return Ok(None);
        }
        let (_, assignment) =
            evaluate_unlabeled(&self.state.global, client, &self.state.thresholds[idx])?;
        let truth = oracle::true_labels(client);
        let (hits, total) = assignment
            .labels
            .iter()
            .zip(truth)
            .filter_map(|(l, &y)| l.pseudo_class.map(|c| c == y))
            .fold((0usize, 0usize), |(h, n), ok| (h + usize::from(ok), n + 1));
        Ok((total > 0).then(|| hits as f64 / total as f64))
    }

    /// Warm-up followed by all FedSemi rounds.
    pub fn run(mut self) -> Result<ExperimentResult> {
        self.run_warmup()?;
        self.run_fedsemi()?;
        self.finish()
    }

    pub fn finish(self) -> Result<ExperimentResult> {
        let final_metrics = metrics::evaluate(&self.state.global, &self.data.test)?;
        Ok(ExperimentResult {
            config: self.cfg,
            client_ids: self.data.clients.iter().map(|c| c.client_id()).collect(),
            final_metrics,
            metrics: self.state.metrics,
            logs: self.state.logs,
            global: self.state.global,
        })
    }
}

/// Warm-up on `cfg`'s data; returns the state after the last warm-up round.
pub fn run_warmup(cfg: &ExperimentConfig) -> Result<FederationState> {
    let mut sim = Simulation::new(cfg.clone(), prepare_data(cfg)?, RunOptions::default())?;
    sim.run_warmup()?;
    Ok(sim.into_state())
}

pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub client_ids: Vec<usize>,
    pub final_metrics: EvalMetrics,
    pub metrics: Vec<MetricsRecord>,
    pub logs: Vec<RoundLog>,
    pub global: ModelParams,
}

#[derive(Serialize)]
struct RoundWeightsSummary<'a> {
    round: usize,
    phase: Phase,
    coefficients: &'a [f64],
    unsup_weights: &'a [f64],
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    strategy: Strategy,
    client_ids: &'a [usize],
    final_round: usize,
    final_metrics: &'a EvalMetrics,
    weights: Vec<RoundWeightsSummary<'a>>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

impl ExperimentResult {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("round,acc,b_acc,precision,auc");
        for prefix in ["coef", "unsup", "pacc"] {
            for id in &self.client_ids {
                let _ = write!(out, ",{prefix}_{id}");
            }
        }
        out.push('\n');
        for m in &self.metrics {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                m.round,
                fmt_f64(m.metrics.accuracy),
                fmt_f64(m.metrics.balanced_accuracy),
                fmt_f64(m.metrics.macro_precision),
                fmt_f64(m.metrics.macro_auc)
            );
            for v in m.coefficients.iter().chain(&m.unsup_weights) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            for v in &m.pseudo_label_accuracy {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{}", fmt_f64(*v));
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let summary = Summary {
            config: &self.config,
            strategy: self.config.strategy,
            client_ids: &self.client_ids,
            final_round: self.logs.last().map_or(0, |l| l.round),
            final_metrics: &self.final_metrics,
            weights: self
                .logs
                .iter()
                .map(|l| RoundWeightsSummary {
                    round: l.round,
                    phase: l.phase,
                    coefficients: &l.weights.coefficients,
                    unsup_weights: &l.weights.unsup_weights,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Config(format!("cannot serialise summary: {e}")))
    }

    /// Writes `metrics.csv`, `summary.json` and `weights/round_<t>.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let weights_dir = dir.join("weights");
        fs::create_dir_all(&weights_dir).map_err(|e| Error::io(&weights_dir, e))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.metrics_csv()).map_err(|e| Error::io(&csv, e))?;
        let summary = dir.join("summary.json");
        fs::write(&summary, self.summary_json()?).map_err(|e| Error::io(&summary, e))?;
        for log in &self.logs {
            let path = weights_dir.join(format!("round_{}.json", log.round));
            let text = serde_json::to_string_pretty(log).map_err(|e| Error::json(&path, e))?;
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Test error of the final global model (1 - balanced accuracy).
    pub fn final_error(&self) -> f64 {
        1.0 - self.final_metrics.balanced_accuracy
    }
}

pub fn run_with_data(
    cfg: &ExperimentConfig,
    data: FederatedData,
    options: RunOptions,
) -> Result<ExperimentResult> {
    Simulation::new(cfg.clone(), data, options)?.run()
}

/// Runs `cfg` end to end and, when `out_dir` is given, writes the outputs.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    options: RunOptions,
) -> Result<ExperimentResult> {
    let result = run_with_data(cfg, prepare_data(cfg)?, options)?;
    if let Some(dir) = out_dir {
        result.write(dir)?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    /// `None` marks the full-federation baseline row.
    pub client_id: Option<usize>,
    pub data_size: usize,
    pub error_full: f64,
    pub error_without: f64,
    pub delta_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooTable {
    pub rows: Vec<LooRow>,
}

impl LooTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,data_size,error_full,error_without,delta_error\n");
        for r in &self.rows {
            let id = r
                .client_id
                .map_or_else(|| "full".to_string(), |i| i.to_string());
            let _ = writeln!(
                out,
                "{id},{},{},{},{}",
                r.data_size,
                fmt_f64(r.error_full),
                fmt_f64(r.error_without),
                fmt_f64(r.delta_error)
            );
        }
        out
    }

    pub fn row_for(&self, client_id: usize) -> Option<&LooRow> {
        self.rows.iter().find(|r| r.client_id == Some(client_id))
    }
}

/// Leave-one-out valuation of every fully unlabeled client.
///
/// The full run's outputs go to `<out>/full`, each reduced run's to
/// `<out>/without_<id>`, and the table to `<out>/loo.csv`.
pub fn leave_one_out_with_data(
    cfg: &ExperimentConfig,
    data: FederatedData,
    out_dir: Option<&Path>,
    options: RunOptions,
) -> Result<LooTable> {
    let unlabeled: Vec<usize> = data
        .clients
        .iter()
        .filter(|c| c.n_labeled() == 0)
        .map(|c| c.client_id())
        .collect();
    if unlabeled.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 2 unlabeled clients, found {}",
            unlabeled.len()
        )));
    }
    let full = run_with_data(cfg, data.clone(), options)?;
    if let Some(dir) = out_dir {
        full.write(&dir.join("full"))?;
    }
    let error_full = full.final_error();
    let total_unlabeled: usize = data.clients.iter().map(ClientDataset::n_unlabeled).sum();
    let mut rows = vec![LooRow {
        client_id: None,
        data_size: total_unlabeled,
        error_full,
        error_without: error_full,
        delta_error: 0.0,
    }];
    for id in unlabeled {
        let reduced = FederatedData {
            clients: data
                .clients
                .iter()
                .filter(|c| c.client_id() != id)
                .cloned()
                .collect(),
            ..data.clone()
        };
        let size = data
            .clients
            .iter()
            .find(|c| c.client_id() == id)
            .map_or(0, ClientDataset::len);
        let res = run_with_data(cfg, reduced, options)?;
        if let Some(dir) = out_dir {
            res.write(&dir.join(format!("without_{id}")))?;
        }
        let error_without = res.final_error();
        rows.push(LooRow {
            client_id: Some(id),
            data_size: size,
            error_full,
            error_without,
            delta_error: error_without - error_full,
        });
    }
    let table = LooTable { rows };
    if let Some(dir) = out_dir {
        let path = dir.join("loo.csv");
        fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}

pub fn leave_one_out(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    options: RunOptions,
) -> Result<LooTable> {
    leave_one_out_with_data(cfg, prepare_data(cfg)?, out_dir, options)
}

/// Sets a dotted path (e.g. `partition.alpha`) inside a JSON object,
/// creating intermediate objects as needed.
pub fn set_json_path(
    root: &mut serde_json::Value,
    path: &str,
    value: serde_json::Value,
) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid parameter path {path:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{path:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses a sweep value as JSON, falling back to a plain string.
pub fn parse_sweep_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// One run per value of `param`, each written to `<out>/<param>=<value>`.
pub fn sweep(
    base: &serde_json::Value,
    param: &str,
    values: &[String],
    out_dir: &Path,
    options: RunOptions,
) -> Result<Vec<PathBuf>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut dirs = Vec::with_capacity(values.len());
    for raw in values {
        let mut v = base.clone();
        set_json_path(&mut v, param, parse_sweep_value(raw))?;
        let cfg = ExperimentConfig::from_value(v)?;
        let dir = out_dir.join(format!("{param}={raw}"));
        run_experiment(&cfg, Some(&dir), options)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn smoke_config() -> ExperimentConfig {
        serde_json::from_value(serde_json::json!({
            "name": "unit",
            "seed": 5,
            "data": {"kind": "mixture", "classes": 3, "dim": 4, "n_max": 60, "spread": 0.2, "test_per_class": 20},
            "partition": {"clients": 3, "alpha": 1.0, "labeled_client_ids": [0], "labeled_share": 0.2},
            "architecture": {"hidden": [8]},
            "warmup_rounds": 2,
            "rounds": 3,
            "local": {"batch_size": 16}
        }))
        .unwrap()
    }

    #[test]
    fn lambda_schedule() {
        let c = LambdaSchedule::Constant { value: 0.5 };
        assert_eq!(c.at(1, 10), 0.5);
        let l = LambdaSchedule::Linear {
            start: 1.0,
            end: 0.5,
        };
        assert_eq!(l.at(1, 11), 1.0);
        assert_eq!(l.at(11, 11), 0.5);
        assert!((l.at(6, 11) - 0.75).abs() < 1e-12);
        assert_eq!(l.at(1, 1), 1.0);
    }

    #[test]
    fn zero_warmup_keeps_initial_model() {
        let mut cfg = smoke_config();
        cfg.warmup_rounds = 0;
        let state = run_warmup(&cfg).unwrap();
        let arch = cfg.architecture.build(4, 3).unwrap();
        assert_eq!(
            state.global,
            tensor_net::init_params(&arch, cfg.init_seed()).unwrap()
        );
        assert_eq!(state.round, 0);
    }

    #[test]
    fn warmup_needs_labeled_client() {
        let mut cfg = smoke_config();
        cfg.partition.labeled_client_ids.clear();
        cfg.partition.labeled_share = None;
        let data = prepare_data(&cfg).unwrap();
        assert!(matches!(
            Simulation::new(cfg, data, RunOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn warmup_weights_follow_labeled_sizes() {
        let mut cfg = smoke_config();
        cfg.partition = PartitionConfig {
            clients: 3,
            alpha: 1.0,
            labeled_client_ids: vec![0, 1],
            label_fraction: None,
            labeled_share: Some(0.4),
            seed: Some(1),
        };
        let data = prepare_data(&cfg).unwrap();
        let n0 = data.clients[0].n_labeled() as f64;
        let n1 = data.clients[1].n_labeled() as f64;
        let mut sim = Simulation::new(cfg, data, RunOptions::with_threads(1)).unwrap();
        sim.run_warmup().unwrap();
        for log in &sim.state().logs {
            let c = &log.weights.coefficients;
            assert_eq!(c[0], n0 / (n0 + n1));
            assert_eq!(c[1], n1 / (n0 + n1));
            assert_eq!(c[2], 0.0);
        }
    }

    #[test]
    fn json_path_setting() {
        let mut v = serde_json::json!({"partition": {"alpha": 0.8}});
        set_json_path(&mut v, "partition.alpha", parse_sweep_value("0.1")).unwrap();
        set_json_path(&mut v, "strategy", parse_sweep_value("fedavg")).unwrap();
        assert_eq!(v["partition"]["alpha"], 0.1);
        assert_eq!(v["strategy"], "fedavg");
        assert!(set_json_path(&mut v, "partition..x", serde_json::Value::Null).is_err());
    }

    #[test]
    fn config_requires_one_size_field() {
        let mut cfg = smoke_config();
        cfg.data = DataConfig::Mixture {
            classes: 3,
            dim: 4,
            n_max: Some(10),
            total: Some(30),
            imbalance_factor: 1.0,
            spread: 0.2,
            test_per_class: 5,
            seed: None,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn total_derives_n_max() {
        let mut cfg = smoke_config();
        cfg.data = DataConfig::Mixture {
            classes: 4,
            dim: 8,
            n_max: None,
            total: Some(2000),
            imbalance_factor: 10.0,
            spread: 0.3,
            test_per_class: 5,
            seed: None,
        };
        cfg.partition.clients = 6;
        cfg.partition.labeled_share = Some(0.05);
        let data = prepare_data(&cfg).unwrap();
        let n: usize = data.clients.iter().map(ClientDataset::len).sum();
        assert_eq!(n, 2000);
    }
}
