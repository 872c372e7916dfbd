//! The server: round planning, weighted aggregation and the training loops
//! for alternate training, the ramp-weighted ablation and the baselines.
//!
//! Silo jobs of one round run on a rayon pool of `jobs` threads. Each job
//! draws from its own stream seeded by `(seed, silo_id, round)` and results
//! are aggregated in silo-id order, so the thread count never changes the
//! outcome.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::error::{FatError, Result};
use crate::loss;
use crate::model::{self, ModelParams};
use crate::rng::silo_round_seed;
use crate::trainer::{self, LocalTrainConfig, LocalUpdate, SiloDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Fat,
    FedavgAll,
    SupervisedOnly,
    WeightedRamp,
    ThresholdSota,
    Centralized,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 6] = [
        AggregationMode::Fat,
        AggregationMode::FedavgAll,
        AggregationMode::SupervisedOnly,
        AggregationMode::WeightedRamp,
        AggregationMode::ThresholdSota,
        AggregationMode::Centralized,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AggregationMode::Fat => "fat",
            AggregationMode::FedavgAll => "fedavg_all",
            AggregationMode::SupervisedOnly => "supervised_only",
            AggregationMode::WeightedRamp => "weighted_ramp",
            AggregationMode::ThresholdSota => "threshold_sota",
            AggregationMode::Centralized => "centralized",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMode {
    type Err = FatError;

    fn from_str(s: &str) -> Result<Self> {
        AggregationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FatError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Supervised,
    Unsupervised,
    /// Supervised and unsupervised silos in the same round.
    Mixed,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Supervised => "supervised",
            Phase::Unsupervised => "unsupervised",
            Phase::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Supervised iff `t mod 2A < A`.
pub fn phase_of(t: usize, alternation_period: usize) -> Phase {
    assert!(alternation_period >= 1, "alternation period must be at least 1");
    if t % (2 * alternation_period) < alternation_period {
        Phase::Supervised
    } else {
        Phase::Unsupervised
    }
}

/// `exp(-5 (1 - T)^2)` with `T = t / (total - 1)`.
pub fn gaussian_rampup(t: usize, total_rounds: usize) -> Result<f64> {
    if total_rounds < 2 || t >= total_rounds {
        return Err(FatError::invalid(format!("ramp-up needs 0 <= t < T and T >= 2, got t={t} T={total_rounds}")));
    }
    let progress = t as f64 / (total_rounds - 1) as f64;
    Ok((-5.0 * (1.0 - progress).powi(2)).exp())
}

/// Weighted mean with weights `w_k / Σ w`, accumulated in `f64`.
pub fn aggregate_weighted(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = *models.first().ok_or_else(|| FatError::invalid("aggregate: no models"))?;
    if models.len() != weights.len() {
        return Err(FatError::invalid(format!("aggregate: {} models, {} weights", models.len(), weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(FatError::invalid(format!("aggregate: weights must be positive, got {weights:?}")));
    }
    for m in models {
        first.check_same_arch(m)?;
    }
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0f64; first.param_count()];
    for (m, w) in models.iter().zip(weights) {
        let w = w / total;
        let mut i = 0;
        for t in m.tensors() {
            for &v in t.data() {
                acc[i] += w * v as f64;
                i += 1;
            }
        }
    }
    let mut out = first.clone();
    let mut i = 0;
    for t in out.tensors_mut() {
        for v in t.data_mut() {
            *v = acc[i] as f32;
            i += 1;
        }
    }
    Ok(out)
}

/// Sample-count weighted average, `N_k / Σ N`.
pub fn aggregate(models: &[&ModelParams], sample_counts: &[usize]) -> Result<ModelParams> {
    if sample_counts.contains(&0) {
        return Err(FatError::invalid("aggregate: sample counts must be positive"));
    }
    let weights: Vec<f64> = sample_counts.iter().map(|&n| n as f64).collect();
    aggregate_weighted(models, &weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub mode: AggregationMode,
    pub total_rounds: usize,
    pub alternation_period: usize,
    pub eval_every: usize,
    /// Supervised-only rounds before unlabeled silos join in the threshold
    /// baseline; `None` means `total_rounds / 6`.
    pub warmup_rounds: Option<usize>,
    pub seed: u64,
    pub local: LocalTrainConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            mode: AggregationMode::Fat,
            total_rounds: 60,
            alternation_period: 5,
            eval_every: 5,
            warmup_rounds: None,
            seed: 0,
            local: LocalTrainConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_rounds.unwrap_or(self.total_rounds / 6)
    }
}

/// How a participant trains in a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalRoutine {
    Supervised,
    Unsupervised,
    Threshold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Participant {
    pub silo_id: usize,
    pub routine: LocalRoutine,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    pub phase: Phase,
    /// Sorted by silo id; weights sum to 1.
    pub participants: Vec<Participant>,
}

/// Silo id given to the pooled dataset in centralized training.
pub const POOLED_SILO_ID: usize = 0;

/// Checks the silo layout against the mode before any training happens.
pub fn validate_setup(cfg: &FederationConfig, silos: &[SiloDataset]) -> Result<()> {
    if cfg.total_rounds < 1 || cfg.alternation_period < 1 || cfg.eval_every < 1 {
        return Err(FatError::Config("total_rounds, alternation_period and eval_every must be >= 1".into()));
    }
    cfg.local.validate()?;
    let mut ids: Vec<usize> = silos.iter().map(|s| s.silo_id()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(FatError::Config("duplicate silo ids".into()));
    }
    let n_sup = silos.iter().filter(|s| s.is_supervised()).count();
    let n_unsup = silos.len() - n_sup;
    if n_sup == 0 {
        return Err(FatError::Config("at least one supervised silo is required".into()));
    }
    match cfg.mode {
        AggregationMode::Fat | AggregationMode::WeightedRamp | AggregationMode::ThresholdSota if n_unsup == 0 => Err(
            FatError::Config(format!("mode {} needs at least one unsupervised silo", cfg.mode)),
        ),
        AggregationMode::WeightedRamp if cfg.total_rounds < 2 => {
            Err(FatError::Config("weighted_ramp needs at least 2 rounds".into()))
        }
        AggregationMode::FedavgAll | AggregationMode::Centralized => {
            match silos.iter().find(|s| s.diagnostic_labels().is_none()) {
                Some(s) => Err(FatError::Config(format!(
                    "mode {} needs labels on every silo; silo {} has none",
                    cfg.mode,
                    s.silo_id()
                ))),
                None => Ok(()),
            }
        }
        _ => Ok(()),
    }
}

fn participants(silos: &[SiloDataset], pick: impl Fn(&SiloDataset) -> Option<(LocalRoutine, f64)>) -> Vec<Participant> {
    let mut ps: Vec<Participant> = silos
        .iter()
        .filter_map(|s| {
            pick(s).map(|(routine, w)| Participant {
                silo_id: s.silo_id(),
                routine,
                weight: w,
            })
        })
        .collect();
    ps.sort_by_key(|p| p.silo_id);
    let total: f64 = ps.iter().map(|p| p.weight).sum();
    for p in &mut ps {
        p.weight /= total;
    }
    ps
}

/// Who trains in round `t`, how, and with what aggregation weight.
pub fn plan_round(cfg: &FederationConfig, silos: &[SiloDataset], t: usize) -> Result<RoundPlan> {
    let count = |s: &SiloDataset| s.len() as f64;
    let (phase, ps) = match cfg.mode {
        AggregationMode::Fat => {
            let phase = phase_of(t, cfg.alternation_period);
            let want_sup = phase == Phase::Supervised;
            let ps = participants(silos, |s| {
                (s.is_supervised() == want_sup).then(|| {
                    let r = if want_sup { LocalRoutine::Supervised } else { LocalRoutine::Unsupervised };
                    (r, count(s))
                })
            });
            (phase, ps)
        }
        AggregationMode::FedavgAll => (
            Phase::Supervised,
            participants(silos, |s| Some((LocalRoutine::Supervised, count(s)))),
        ),
        AggregationMode::SupervisedOnly => (
            Phase::Supervised,
            participants(silos, |s| s.is_supervised().then(|| (LocalRoutine::Supervised, count(s)))),
        ),
        AggregationMode::WeightedRamp => {
            let eta = gaussian_rampup(t, cfg.total_rounds)?;
            (
                Phase::Mixed,
                participants(silos, |s| {
                    Some(if s.is_supervised() {
                        (LocalRoutine::Supervised, count(s))
                    } else {
                        (LocalRoutine::Unsupervised, eta * count(s))
                    })
                }),
            )
        }
        AggregationMode::ThresholdSota => {
            if t < cfg.warmup() {
                (
                    Phase::Supervised,
                    participants(silos, |s| s.is_supervised().then(|| (LocalRoutine::Supervised, count(s)))),
                )
            } else {
                (
                    Phase::Mixed,
                    participants(silos, |s| {
                        Some(if s.is_supervised() {
                            (LocalRoutine::Supervised, count(s))
                        } else {
                            (LocalRoutine::Threshold, count(s))
                        })
                    }),
                )
            }
        }
        AggregationMode::Centralized => (
            Phase::Supervised,
            vec![Participant {
                silo_id: POOLED_SILO_ID,
                routine: LocalRoutine::Supervised,
                weight: 1.0,
            }],
        ),
    };
    if ps.is_empty() {
        return Err(FatError::Config(format!("round {t} ({phase}) has no participants")));
    }
    Ok(RoundPlan {
        round: t,
        phase,
        participants: ps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub phase: Phase,
    /// Test Dice per class, index = class id.
    pub dice: Vec<f64>,
    pub mean_train_loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct RunHistory {
    pub config: FederationConfig,
    pub records: Vec<MetricsRecord>,
    pub final_params: ModelParams,
    pub round_wall_ms: Vec<u64>,
}

impl RunHistory {
    /// Index (0-based) of the first evaluation at which `class_id` Dice
    /// reaches `target`.
    pub fn first_eval_reaching(&self, class_id: usize, target: f64) -> Option<usize> {
        self.records.iter().position(|r| r.dice[class_id] >= target)
    }

    pub fn final_dice(&self, class_id: usize) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.dice[class_id])
    }
}

/// Per-class Dice of the argmax prediction on a labeled set.
pub fn evaluate(params: &ModelParams, test_set: &SiloDataset) -> Result<Vec<f64>> {
    let truth = test_set
        .diagnostic_labels()
        .ok_or_else(|| FatError::Config("test set has no labels".into()))?;
    let probs = model::predict_probs(params, test_set.images())?;
    let pred = augment::pseudo_label(&probs)?;
    loss::dice_per_class(&pred, truth)
}

fn run_local(
    routine: LocalRoutine,
    silo: &SiloDataset,
    theta: &ModelParams,
    cfg: &LocalTrainConfig,
) -> Result<LocalUpdate> {
    match routine {
        LocalRoutine::Supervised => trainer::supervised_training(silo, theta, cfg),
        LocalRoutine::Unsupervised => trainer::unsupervised_training(silo, theta, cfg),
        LocalRoutine::Threshold => trainer::threshold_selftrain(silo, theta, cfg),
    }
}

fn run_rounds(
    cfg: &FederationConfig,
    silos: &[SiloDataset],
    theta0: &ModelParams,
    test_set: &SiloDataset,
    jobs: usize,
) -> Result<RunHistory> {
    validate_setup(cfg, silos)?;
    // Datasets as the trainers see them in this mode.
    let working: Vec<SiloDataset> = match cfg.mode {
        AggregationMode::FedavgAll => silos.iter().map(SiloDataset::revealed).collect::<Result<_>>()?,
        AggregationMode::Centralized => {
            let mut sorted: Vec<&SiloDataset> = silos.iter().collect();
            sorted.sort_by_key(|s| s.silo_id());
            vec![SiloDataset::pool(POOLED_SILO_ID, &sorted)?]
        }
        _ => silos.to_vec(),
    };
    let find = |id: usize| {
        working
            .iter()
            .find(|s| s.silo_id() == id)
            .ok_or_else(|| FatError::Config(format!("no silo with id {id}")))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| FatError::Config(format!("thread pool: {e}")))?;

    let desc = theta0.descriptor();
    let mut theta = theta0.clone();
    let mut records = Vec::new();
    let mut round_wall_ms = Vec::with_capacity(cfg.total_rounds);
    for t in 0..cfg.total_rounds {
        let started = Instant::now();
        let plan = plan_round(cfg, &working, t)?;
        let jobs: Vec<(&Participant, &SiloDataset)> = plan
            .participants
            .iter()
            .map(|p| find(p.silo_id).map(|s| (p, s)))
            .collect::<Result<_>>()?;
        let updates: Vec<LocalUpdate> = pool.install(|| {
            jobs.par_iter()
                .map(|(p, silo)| {
                    let local = cfg.local.with_seed(silo_round_seed(cfg.seed, p.silo_id, t));
                    run_local(p.routine, silo, &theta, &local)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let models: Vec<&ModelParams> = updates.iter().map(|u| &u.params).collect();
        let weights: Vec<f64> = plan.participants.iter().map(|p| p.weight).collect();
        theta = aggregate_weighted(&models, &weights)?;
        if theta.descriptor() != desc || !theta.is_finite() {
            return Err(FatError::InvalidArgument(format!("global model invalid after round {t}")));
        }
        let mean_loss = updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64;
        let wall_ms = started.elapsed().as_millis() as u64;
        round_wall_ms.push(wall_ms);
        if (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.total_rounds {
            records.push(MetricsRecord {
                round: t,
                phase: plan.phase,
                dice: evaluate(&theta, test_set)?,
                mean_train_loss: mean_loss,
                wall_ms,
            });
        }
    }
    Ok(RunHistory {
        config: cfg.clone(),
        records,
        final_params: theta,
        round_wall_ms,
    })
}

fn expect_mode(cfg: &FederationConfig, allowed: &[AggregationMode]) -> Result<()> {
    if allowed.contains(&cfg.mode) {
        Ok(())
    } else {
        Err(FatError::Config(format!("mode {} not handled here (expected one of {allowed:?})", cfg.mode)))
    }
}

/// Alternate training: `A` rounds over the supervised silos, then `A` over
/// the unsupervised ones, each aggregated with its own group's weights.
pub fn run_fat(
    cfg: &FederationConfig,
    silos: &[SiloDataset],
    theta0: &ModelParams,
    test_set: &SiloDataset,
    jobs: usize,
) -> Result<RunHistory> {
    expect_mode(cfg, &[AggregationMode::Fat])?;
    run_rounds(cfg, silos, theta0, test_set, jobs)
}

/// Every silo every round; unsupervised weights scaled by the Gaussian
/// ramp-up and renormalized.
pub fn run_weighted_ramp(
    cfg: &FederationConfig,
    silos: &[SiloDataset],
    theta0: &ModelParams,
    test_set: &SiloDataset,
    jobs: usize,
) -> Result<RunHistory> {
    expect_mode(cfg, &[AggregationMode::WeightedRamp])?;
    run_rounds(cfg, silos, theta0, test_set, jobs)
}

pub fn run_baseline(
    cfg: &FederationConfig,
    silos: &[SiloDataset],
    theta0: &ModelParams,
    test_set: &SiloDataset,
    jobs: usize,
) -> Result<RunHistory> {
    expect_mode(
        cfg,
        &[
            AggregationMode::FedavgAll,
            AggregationMode::SupervisedOnly,
            AggregationMode::ThresholdSota,
            AggregationMode::Centralized,
        ],
    )?;
    run_rounds(cfg, silos, theta0, test_set, jobs)
}

/// Dispatches on `cfg.mode`.
pub fn run(
    cfg: &FederationConfig,
    silos: &[SiloDataset],
    theta0: &ModelParams,
    test_set: &SiloDataset,
    jobs: usize,
) -> Result<RunHistory> {
    match cfg.mode {
        AggregationMode::Fat => run_fat(cfg, silos, theta0, test_set, jobs),
        AggregationMode::WeightedRamp => run_weighted_ramp(cfg, silos, theta0, test_set, jobs),
        _ => run_baseline(cfg, silos, theta0, test_set, jobs),
    }
}
