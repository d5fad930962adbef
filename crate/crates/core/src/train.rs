//! Full and transfer training loops with per-step logging, validation-based
//! early stopping and run-directory output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint;
use crate::autodiff::{LrSchedule, Optimizer, OptimizerKind};
use crate::datastore::{Corpus, PreparedSample, SplitTag};
use crate::error::{Error, Result};
use crate::loss::{
    base_loss_sample, combined_loss, fg_bg_weights, joint_loss_sample, mask_loss_sample, type_loss_sample,
    FgBgWeights, LossBreakdown, LossComponents, LossWeights,
};
use crate::model::{ArchitectureSpec, Features, MultiObjectiveNet, OutputGrads, Outputs};
use crate::synth::derive_seed;

pub const STEP_LOG_FILE: &str = "train_log.csv";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const BEST_CHECKPOINT: &str = "ckpt-best.bin";
pub const FINAL_CHECKPOINT: &str = "ckpt-final.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub optimizer: OptimizerKind,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Epochs without a new best validation loss before stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            seed: 0,
            weights: LossWeights::default(),
            optimizer: OptimizerKind::Adam,
            lr_start: LrSchedule::START,
            lr_end: LrSchedule::END,
            early_stop_patience: 10,
        }
    }

    pub fn transfer() -> Self {
        Self {
            epochs: 30,
            ..Self::full()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        self.weights.validate()?;
        self.schedule().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken up to the end of this epoch.
    pub steps: usize,
    pub lr: f64,
    /// Mean of the epoch's step losses.
    pub train_final: f64,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn best_val(&self) -> Option<LossBreakdown> {
        self.epochs.get(self.best_epoch).map(|e| e.val)
    }

    pub fn final_val(&self) -> Option<LossBreakdown> {
        self.epochs.last().map(|e| e.val)
    }

    /// Step count at the end of the first epoch whose validation loss is at
    /// or below `target`.
    pub fn steps_to_reach(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.val.final_ <= target).map(|e| e.steps)
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,mask,jcoords,bcoords,type,final\n");
        for r in &self.steps {
            let l = &r.loss;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step, r.epoch, r.lr, l.mask, l.jcoords, l.bcoords, l.type_, l.final_
            );
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,steps,lr,train_final,val_mask,val_jcoords,val_bcoords,val_type,val_final\n");
        for e in &self.epochs {
            let v = &e.val;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch, e.steps, e.lr, e.train_final, v.mask, v.jcoords, v.bcoords, v.type_, v.final_
            );
        }
        s
    }
}

/// Result of a training run: the network after the last epoch, the one with
/// the lowest validation loss, and the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_net: MultiObjectiveNet,
    pub best_net: MultiObjectiveNet,
    pub log: TrainLog,
}

impl TrainOutcome {
    /// Writes both checkpoints and both CSV logs into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        self.best_net.save(&dir.join(BEST_CHECKPOINT))?;
        self.final_net.save(&dir.join(FINAL_CHECKPOINT))?;
        checkpoint::write_atomic(&dir.join(STEP_LOG_FILE), self.log.steps_csv().as_bytes())?;
        checkpoint::write_atomic(&dir.join(EPOCH_LOG_FILE), self.log.epochs_csv().as_bytes())
    }
}

fn check_compatible(net: &MultiObjectiveNet, corpus: &Corpus) -> Result<()> {
    if net.n_joints() != corpus.n_joints {
        return Err(Error::ShapeMismatch(format!(
            "network predicts {} joints, dataset has {}",
            net.n_joints(),
            corpus.n_joints
        )));
    }
    if let Some(s) = corpus.samples.iter().find(|s| s.label >= net.n_types()) {
        return Err(Error::BadLabel {
            label: s.label,
            classes: net.n_types(),
        });
    }
    let spec = net.spec();
    if corpus.samples.iter().any(|s| (s.height, s.width) != (spec.input_height, spec.input_width)) {
        return Err(Error::ShapeMismatch("dataset resolution differs from the network input".into()));
    }
    Ok(())
}

/// Trains every trainable parameter of `net` on the train split, validating
/// on the test split after each epoch. The joint and base heads start from
/// the mean training targets.
pub fn train_full(mut net: MultiObjectiveNet, corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(&net, corpus)?;
    let (joints, base) = target_means(corpus)?;
    net.set_regression_offsets(Some(&joints), Some(base))?;
    Trainer::new(net, corpus, config)?.run()
}

/// Loads a pretrained checkpoint, resizes the joint and type heads for
/// `corpus`, freezes the transferred layers and trains the rest.
pub fn train_transfer(pretrained: &Path, corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    let net = MultiObjectiveNet::load(pretrained)?;
    if *net.spec() != ArchitectureSpec::standard() {
        return Err(Error::CheckpointMismatch(format!(
            "pretrained architecture {:?} differs from the standard one",
            net.spec()
        )));
    }
    train_transfer_from(net, corpus, config)
}

/// [`train_transfer`] starting from an in-memory network.
pub fn train_transfer_from(mut net: MultiObjectiveNet, corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = net.spec();
    if corpus.samples.iter().any(|s| (s.height, s.width) != (spec.input_height, spec.input_width)) {
        return Err(Error::CheckpointMismatch("pretrained input size does not fit the dataset".into()));
    }
    if corpus.count(SplitTag::Train) == 0 {
        return Err(Error::EmptySplit("train".into()));
    }
    net.adapt_joint_head(corpus.n_joints, derive_seed(config.seed, 0x4A))?;
    net.adapt_type_head(corpus.n_types, derive_seed(config.seed, 0x54))?;
    net.freeze_for_transfer();
    check_compatible(&net, corpus)?;
    let (joints, _) = target_means(corpus)?;
    net.set_regression_offsets(Some(&joints), None)?;
    Trainer::new(net, corpus, config)?.run()
}

/// Mean joint and base targets over the train split.
pub fn target_means(corpus: &Corpus) -> Result<(Vec<f64>, [f64; 3])> {
    let idx = corpus.indices(SplitTag::Train);
    if idx.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let n = idx.len() as f64;
    let mut joints = vec![0.0; 3 * corpus.n_joints];
    let mut base = [0.0; 3];
    for &i in &idx {
        let s = &corpus.samples[i];
        joints.iter_mut().zip(&s.joints).for_each(|(m, v)| *m += v / n);
        base.iter_mut().zip(&s.base).for_each(|(m, v)| *m += v / n);
    }
    Ok((joints, base))
}

/// Mean losses of `net` over one split; the mask weights come from the
/// split's pooled ground truth.
pub fn split_loss(net: &MultiObjectiveNet, corpus: &Corpus, tag: SplitTag, weights: &LossWeights) -> Result<LossBreakdown> {
    evaluate_indices(net, corpus, &corpus.indices(tag), weights, &FeatureSource::Live)
}

enum FeatureSource {
    Live,
    Cached(Vec<Option<Features>>),
}

impl FeatureSource {
    fn get(&self, net: &MultiObjectiveNet, i: usize, s: &PreparedSample) -> Result<Features> {
        match self {
            FeatureSource::Cached(c) if c[i].is_some() => Ok(c[i].clone().expect("checked")),
            _ => Ok(net.forward_features(&s.image())?.0),
        }
    }
}

fn batch_weights(corpus: &Corpus, idx: &[usize]) -> Result<FgBgWeights> {
    let mut all = Vec::with_capacity(idx.len() * corpus.samples[idx[0]].mask.len());
    for &i in idx {
        all.extend_from_slice(&corpus.samples[i].mask);
    }
    fg_bg_weights(&all)
}

/// Per-sample losses and their weighted output gradients for a batch of `b`.
fn sample_losses(
    out: &Outputs,
    s: &PreparedSample,
    w: FgBgWeights,
    weights: &LossWeights,
    b: usize,
    want_grads: bool,
) -> Result<(LossComponents, Option<OutputGrads>)> {
    let n_px = s.mask.len() as f64;
    let bf = b as f64;
    let mut gmask = vec![0.0; out.mask.len()];
    let mask_sum = mask_loss_sample(&out.mask, &s.mask, w, weights.w_mask / (bf * n_px), &mut gmask)?;
    let (jl, jg) = joint_loss_sample(&out.joints, &s.joints)?;
    let (bl, bg) = base_loss_sample(&out.base, &s.base)?;
    let (tl, tg) = type_loss_sample(&out.types, s.label)?;
    let c = LossComponents {
        mask: mask_sum / (bf * n_px),
        jcoords: jl / bf,
        bcoords: bl / bf,
        type_: tl / bf,
    };
    let grads = want_grads.then(|| {
        let scale = |v: Vec<f64>, k: f64| v.into_iter().map(|g| g * k / bf).collect();
        OutputGrads {
            mask: gmask,
            joints: scale(jg, weights.w_jcoords),
            base: scale(bg, weights.w_bcoords),
            types: scale(tg, weights.w_type),
        }
    });
    Ok((c, grads))
}

fn add(a: &mut LossComponents, b: LossComponents) {
    a.mask += b.mask;
    a.jcoords += b.jcoords;
    a.bcoords += b.bcoords;
    a.type_ += b.type_;
}

fn evaluate_indices(
    net: &MultiObjectiveNet,
    corpus: &Corpus,
    idx: &[usize],
    weights: &LossWeights,
    features: &FeatureSource,
) -> Result<LossBreakdown> {
    if idx.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    let w = batch_weights(corpus, idx)?;
    let mut total = LossComponents::default();
    for &i in idx {
        let s = &corpus.samples[i];
        let f = features.get(net, i, s)?;
        let (out, _) = net.forward_heads(&f)?;
        add(&mut total, sample_losses(&out, s, w, weights, idx.len(), false)?.0);
    }
    Ok(combined_loss(total, weights))
}

fn accumulate_gradients(
    net: &mut MultiObjectiveNet,
    corpus: &Corpus,
    idx: &[usize],
    weights: &LossWeights,
    features: &FeatureSource,
) -> Result<LossBreakdown> {
    if idx.is_empty() {
        return Err(Error::EmptySplit("batch".into()));
    }
    let w = batch_weights(corpus, idx)?;
    net.zero_grad();
    let mut total = LossComponents::default();
    for &i in idx {
        let s = &corpus.samples[i];
        let (f, tape) = match features {
            FeatureSource::Cached(c) => (c[i].clone().expect("every sample cached"), None),
            FeatureSource::Live => {
                let (f, t) = net.forward_features(&s.image())?;
                (f, Some(t))
            }
        };
        let (out, head_tape) = net.forward_heads(&f)?;
        let (c, grads) = sample_losses(&out, s, w, weights, idx.len(), true)?;
        add(&mut total, c);
        let grads = grads.expect("requested");
        if let Some(gf) = net.backward_heads(&f, &head_tape, &out, &grads)? {
            let tape = tape.ok_or_else(|| Error::Config("frozen feature cache with trainable trunk".into()))?;
            net.backward_features(&f, &tape, &gf)?;
        }
    }
    Ok(combined_loss(total, weights))
}

/// Combined loss of the mini-batch `idx`; mask weights come from the
/// batch's pooled ground truth.
pub fn batch_loss(net: &MultiObjectiveNet, corpus: &Corpus, idx: &[usize], weights: &LossWeights) -> Result<LossBreakdown> {
    evaluate_indices(net, corpus, idx, weights, &FeatureSource::Live)
}

/// [`batch_loss`] that also leaves its gradient in every trainable
/// parameter's `grad`.
pub fn batch_gradients(
    net: &mut MultiObjectiveNet,
    corpus: &Corpus,
    idx: &[usize],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    accumulate_gradients(net, corpus, idx, weights, &FeatureSource::Live)
}

struct Trainer<'a> {
    net: MultiObjectiveNet,
    corpus: &'a Corpus,
    config: &'a TrainConfig,
    features: FeatureSource,
    optimizer: Optimizer,
}

impl<'a> Trainer<'a> {
    fn new(net: MultiObjectiveNet, corpus: &'a Corpus, config: &'a TrainConfig) -> Result<Self> {
        if corpus.count(SplitTag::Train) == 0 {
            return Err(Error::EmptySplit("train".into()));
        }
        if corpus.count(SplitTag::Test) == 0 {
            return Err(Error::EmptySplit("test".into()));
        }
        let features = if net.features_frozen() {
            let cache = corpus
                .samples
                .iter()
                .map(|s| Ok(Some(net.forward_features(&s.image())?.0)))
                .collect::<Result<Vec<_>>>()?;
            FeatureSource::Cached(cache)
        } else {
            FeatureSource::Live
        };
        Ok(Self {
            net,
            corpus,
            config,
            features,
            optimizer: Optimizer::new(config.optimizer),
        })
    }

    fn step(&mut self, idx: &[usize], lr: f64) -> Result<LossBreakdown> {
        let loss = accumulate_gradients(&mut self.net, self.corpus, idx, &self.config.weights, &self.features)?;
        for (_, p) in self.net.named_parameters() {
            p.grad.check_finite("gradient")?;
        }
        self.optimizer.step(self.net.parameters_mut(), lr);
        Ok(loss)
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let schedule = self.config.schedule();
        let val_idx = self.corpus.indices(SplitTag::Test);
        let mut log = TrainLog::default();
        let mut best: Option<(f64, MultiObjectiveNet)> = None;

        for epoch in 0..self.config.epochs {
            let lr = schedule.lr_at(epoch)?;
            let plan = self
                .corpus
                .batch_plan(SplitTag::Train, self.config.batch_size, derive_seed(self.config.seed, epoch as u64))?;
            let mut train_sum = 0.0;
            for idx in &plan {
                let loss = self.step(idx, lr)?;
                train_sum += loss.final_;
                log.steps.push(StepLog {
                    step: log.steps.len(),
                    epoch,
                    lr,
                    loss,
                });
            }
            let val = evaluate_indices(&self.net, self.corpus, &val_idx, &self.config.weights, &self.features)?;
            let train_final = train_sum / plan.len() as f64;
            log::info!(
                "epoch {epoch}: lr {lr:.3e} train {train_final:.4} val {:.4} (mask {:.4}, joints {:.4}, base {:.4}, type {:.4})",
                val.final_, val.mask, val.jcoords, val.bcoords, val.type_
            );
            log.epochs.push(EpochLog {
                epoch,
                steps: log.steps.len(),
                lr,
                train_final,
                val,
            });
            if best.as_ref().is_none_or(|(b, _)| val.final_ < *b) {
                best = Some((val.final_, self.net.clone()));
                log.best_epoch = epoch;
            } else if epoch - log.best_epoch >= self.config.early_stop_patience {
                log.stopped_early = true;
                break;
            }
        }
        let (_, best_net) = best.expect("at least one epoch ran");
        Ok(TrainOutcome {
            final_net: self.net,
            best_net,
            log,
        })
    }
}
