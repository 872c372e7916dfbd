//! Local training at one silo: supervised SGD on ground truth, the
//! online/target bootstrapping loop with mixup pseudo-labels, and the
//! threshold self-training baseline.
//!
//! Every trainer draws its randomness from `cfg.seed` only, in a fixed
//! order: one shuffle per epoch, then per step the mixup coefficient
//! (unsupervised) or one intensity shift per sample (threshold baseline).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, MixupPolicy};
use crate::error::{FatError, Result};
use crate::loss::{self, LabelMap};
use crate::model::{self, ModelParams};
use crate::rng::StreamRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One silo's data. Unsupervised silos keep their labels only in a hidden
/// diagnostics slot that no trainer reads.
#[derive(Clone, Debug)]
pub struct SiloDataset {
    silo_id: usize,
    images: Tensor,
    labels: Option<LabelMap>,
    hidden_labels: Option<LabelMap>,
    supervised: bool,
}

/// Image-only view handed to the unsupervised trainers.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a> {
    pub silo_id: usize,
    pub images: &'a Tensor,
}

fn check_pair(images: &Tensor, labels: &LabelMap) -> Result<()> {
    let (n, _, h, w) = images.dims4()?;
    if labels.shape() != [n, h, w] {
        return Err(FatError::shape("SiloDataset", images.shape(), &labels.shape()));
    }
    Ok(())
}

impl SiloDataset {
    pub fn supervised(silo_id: usize, images: Tensor, labels: LabelMap) -> Result<Self> {
        check_pair(&images, &labels)?;
        Ok(SiloDataset {
            silo_id,
            images,
            labels: Some(labels),
            hidden_labels: None,
            supervised: true,
        })
    }

    pub fn unsupervised(silo_id: usize, images: Tensor, hidden_labels: Option<LabelMap>) -> Result<Self> {
        images.dims4()?;
        if let Some(l) = &hidden_labels {
            check_pair(&images, l)?;
        }
        Ok(SiloDataset {
            silo_id,
            images,
            labels: None,
            hidden_labels,
            supervised: false,
        })
    }

    pub fn silo_id(&self) -> usize {
        self.silo_id
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_supervised(&self) -> bool {
        self.supervised
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn training_labels(&self) -> Option<&LabelMap> {
        self.labels.as_ref()
    }

    /// Ground truth for evaluation and the fully supervised baselines,
    /// whichever slot it lives in.
    pub fn diagnostic_labels(&self) -> Option<&LabelMap> {
        self.labels.as_ref().or(self.hidden_labels.as_ref())
    }

    pub fn unlabeled_view(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            silo_id: self.silo_id,
            images: &self.images,
        }
    }

    /// Supervised copy using the hidden labels, for baselines that assume
    /// every silo is annotated.
    pub fn revealed(&self) -> Result<SiloDataset> {
        let labels = self
            .diagnostic_labels()
            .ok_or_else(|| FatError::Config(format!("silo {} has no labels to reveal", self.silo_id)))?;
        SiloDataset::supervised(self.silo_id, self.images.clone(), labels.clone())
    }

    /// Pools several silos into one supervised dataset with id `silo_id`.
    pub fn pool(silo_id: usize, silos: &[&SiloDataset]) -> Result<SiloDataset> {
        if silos.is_empty() {
            return Err(FatError::invalid("nothing to pool"));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut n = 0;
        let shape = silos[0].images.shape().to_vec();
        for s in silos {
            if s.images.shape()[1..] != shape[1..] {
                return Err(FatError::shape("SiloDataset::pool", &shape, s.images.shape()));
            }
            let l = s
                .diagnostic_labels()
                .ok_or_else(|| FatError::Config(format!("silo {} has no labels to pool", s.silo_id)))?;
            data.extend_from_slice(s.images.data());
            labels.push(l);
            n += s.len();
        }
        let mut pooled_shape = shape;
        pooled_shape[0] = n;
        SiloDataset::supervised(silo_id, Tensor::new(pooled_shape, data)?, LabelMap::concat(&labels)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_xi: f64,
    pub ema_decay: f64,
    pub mixup: MixupPolicy,
    /// Threshold self-training: pixels whose clean max probability is below
    /// this are masked out.
    pub threshold: f64,
    pub intensity_level: f64,
    pub dice_include_background: bool,
    /// Set per silo and round by the server; not part of config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            epochs: 2,
            batch_size: 4,
            lr_theta: 0.1,
            lr_xi: 0.1,
            ema_decay: 0.99,
            mixup: MixupPolicy::default(),
            threshold: 0.9,
            intensity_level: 0.9,
            dice_include_background: true,
            seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(FatError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr_theta >= 0.0 && self.lr_xi >= 0.0) {
            return Err(FatError::Config("learning rates must be non-negative".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(FatError::Config(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay)));
        }
        if !(0.0..=1.0).contains(&self.threshold) || !(self.intensity_level >= 0.0) {
            return Err(FatError::Config("threshold must lie in [0, 1], intensity_level >= 0".into()));
        }
        self.mixup.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        LocalTrainConfig { seed, ..self.clone() }
    }
}

/// Result of one silo's local training.
#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub params: ModelParams,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Loss and parameter gradients of Dice + CE for one batch.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Parameter leaves recorded on the tape that produced `grads`.
    pub tape_params: usize,
}

/// `Dice(p, y) + CE(p, y)` with `p = softmax(f(x))`, masked pixels excluded.
pub fn segmentation_objective(
    params: &ModelParams,
    x: &Tensor,
    y: &LabelMap,
    mask: Option<&[bool]>,
    include_background: bool,
) -> Result<Objective> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x.clone());
    let logits = model::forward(&mut tape, params, &vars, xv)?;
    let probs = tape.softmax_channels(logits)?;
    let loss = loss::dice_ce_node(&mut tape, probs, y, mask, include_background)?;
    let value = tape.scalar(loss)?;
    let mut g = tape.backward(loss)?;
    let grads = vars
        .flat()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(Objective {
        loss: value,
        grads,
        tape_params: tape.param_count(),
    })
}

/// `θ − lr · g`.
pub fn sgd_update(params: &ModelParams, grads: &[Tensor], lr: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    let lr = lr as f32;
    let mut tensors = out.tensors_mut();
    if tensors.len() != grads.len() {
        return Err(FatError::invalid(format!("{} gradients for {} tensors", grads.len(), tensors.len())));
    }
    for (p, g) in tensors.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(FatError::shape("sgd_update", p.shape(), g.shape()));
        }
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    if !out.is_finite() {
        return Err(FatError::NonFinite { op: "sgd_update" });
    }
    Ok(out)
}

/// `τ·θ + (1 − τ)·ξ`, evaluated as `θ + (1 − τ)(ξ − θ)` in `f64` so the
/// result stays between the two operands.
pub fn ema_update(theta: &ModelParams, xi: &ModelParams, tau: f64) -> Result<ModelParams> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(FatError::invalid(format!("ema decay must lie in (0, 1), got {tau}")));
    }
    let w = 1.0 - tau;
    theta.zip_map(xi, |t, x| (t as f64 + w * (x as f64 - t as f64)) as f32)
}

pub fn shuffled_indices(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn check_batch(n: usize, batch_size: usize, need: usize, silo_id: usize) -> Result<()> {
    if n < need * batch_size {
        return Err(FatError::Config(format!(
            "silo {silo_id} has {n} samples, needs at least {} for batch size {batch_size}",
            need * batch_size
        )));
    }
    Ok(())
}

/// E epochs of mini-batch SGD on ground-truth labels. The last batch of an
/// epoch may be smaller than `batch_size`.
pub fn supervised_training(silo: &SiloDataset, theta: &ModelParams, cfg: &LocalTrainConfig) -> Result<LocalUpdate> {
    if !silo.is_supervised() {
        return Err(FatError::invalid(format!("silo {} is not supervised", silo.silo_id)));
    }
    cfg.validate()?;
    let labels = silo.training_labels().expect("supervised silos carry labels");
    check_batch(silo.len(), cfg.batch_size, 1, silo.silo_id)?;
    let mut rng = StreamRng::seed_from_u64(cfg.seed);
    let mut params = theta.clone();
    let mut total = 0.0;
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(silo.len(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = silo.images.select_batch(batch)?;
            let y = labels.select_batch(batch)?;
            let obj = segmentation_objective(&params, &x, &y, None, cfg.dice_include_background)?;
            params = sgd_update(&params, &obj.grads, cfg.lr_theta)?;
            total += obj.loss;
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        params,
        mean_loss: total / steps as f64,
        steps,
    })
}

/// Online and target models after one bootstrapping step.
#[derive(Clone, Debug)]
pub struct BootstrapStep {
    pub online: ModelParams,
    pub target: ModelParams,
    pub pseudo_labels: LabelMap,
    pub loss: f64,
    pub tape_params: usize,
}

/// One online/target step: the target labels the mixed batch through
/// mixup of its own predictions, the online model takes an SGD step on
/// those labels, and the target then moves toward the online model.
pub fn bootstrap_step(
    online: &ModelParams,
    target: &ModelParams,
    x1: &Tensor,
    x2: &Tensor,
    lambda: f64,
    cfg: &LocalTrainConfig,
) -> Result<BootstrapStep> {
    let x_mixed = augment::mixup(x1, x2, lambda)?;
    let p1 = model::predict_probs(target, x1)?;
    let p2 = model::predict_probs(target, x2)?;
    let p_mixed = augment::mixup(&p1, &p2, lambda)?;
    let pseudo = augment::pseudo_label(&p_mixed)?;
    let obj = segmentation_objective(online, &x_mixed, &pseudo, None, cfg.dice_include_background)?;
    let online = sgd_update(online, &obj.grads, cfg.lr_xi)?;
    let target = ema_update(target, &online, cfg.ema_decay)?;
    Ok(BootstrapStep {
        online,
        target,
        pseudo_labels: pseudo,
        loss: obj.loss,
        tape_params: obj.tape_params,
    })
}

/// Online/target bootstrapping on an unlabeled silo. Both models start from
/// the global model; each step consumes two disjoint consecutive batches
/// of one shuffled pass, and an epoch ends when fewer than
/// `2 · batch_size` samples remain. Returns the target model.
pub fn unsupervised_training(
    silo: &SiloDataset,
    theta_global: &ModelParams,
    cfg: &LocalTrainConfig,
) -> Result<LocalUpdate> {
    if silo.is_supervised() {
        return Err(FatError::invalid(format!("silo {} is supervised", silo.silo_id)));
    }
    cfg.validate()?;
    train_bootstrap(silo.unlabeled_view(), theta_global, cfg)
}

fn train_bootstrap(view: UnlabeledView<'_>, theta_global: &ModelParams, cfg: &LocalTrainConfig) -> Result<LocalUpdate> {
    let n = view.images.shape()[0];
    check_batch(n, cfg.batch_size, 2, view.silo_id)?;
    let mut rng = StreamRng::seed_from_u64(cfg.seed);
    let mut online = theta_global.clone();
    let mut target = theta_global.clone();
    let mut total = 0.0;
    let mut steps = 0;
    let bs = cfg.batch_size;
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(n, &mut rng);
        for pair in order.chunks_exact(2 * bs) {
            let lambda = cfg.mixup.sample(&mut rng);
            let x1 = view.images.select_batch(&pair[..bs])?;
            let x2 = view.images.select_batch(&pair[bs..])?;
            let step = bootstrap_step(&online, &target, &x1, &x2, lambda, cfg)?;
            online = step.online;
            target = step.target;
            total += step.loss;
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        params: target,
        mean_loss: total / steps as f64,
        steps,
    })
}

/// `true` where the clean max probability reaches the threshold.
pub fn confidence_mask(clean_probs: &Tensor, threshold: f64) -> Result<Vec<bool>> {
    Ok(augment::max_probability(clean_probs)?
        .into_iter()
        .map(|p| p as f64 >= threshold)
        .collect())
}

/// Single-model self-training: pseudo-labels from the clean input, loss on
/// an intensity-shifted copy, low-confidence pixels masked out.
pub fn threshold_selftrain(silo: &SiloDataset, theta: &ModelParams, cfg: &LocalTrainConfig) -> Result<LocalUpdate> {
    if silo.is_supervised() {
        return Err(FatError::invalid(format!("silo {} is supervised", silo.silo_id)));
    }
    cfg.validate()?;
    let view = silo.unlabeled_view();
    let n = view.images.shape()[0];
    check_batch(n, cfg.batch_size, 1, view.silo_id)?;
    let mut rng = StreamRng::seed_from_u64(cfg.seed);
    let mut params = theta.clone();
    let mut total = 0.0;
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(n, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = view.images.select_batch(batch)?;
            let clean = model::predict_probs(&params, &x)?;
            let labels = augment::pseudo_label(&clean)?;
            let mask = confidence_mask(&clean, cfg.threshold)?;
            let shifted = augment::intensity_shift(&x, cfg.intensity_level, &mut rng)?;
            let obj = segmentation_objective(&params, &shifted, &labels, Some(&mask), cfg.dice_include_background)?;
            params = sgd_update(&params, &obj.grads, cfg.lr_theta)?;
            total += obj.loss;
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        params,
        mean_loss: total / steps as f64,
        steps,
    })
}
