//! Baseline pre-training, episodic meta-training and few-shot fine-tuning.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::embeddings::Backbone;
use crate::episodes::{augment, episode_rng, sample_episode, Augment, DatasetTable};
use crate::error::{Error, Result};
use crate::heads::{self, tape, HeadConfig, HeadKind, HeadState, SupportSet};
use crate::numerics::{argmax, Bound, Gradients, Graph, OptimizerConfig, ParamSet, Tensor, Var};

const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    MetaTrain,
    FineTune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::MetaTrain => "meta_train",
            Phase::FineTune => "fine_tune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phase: Phase,
    /// Epochs for pre-training, episodes for meta-training, full-batch
    /// iterations for fine-tuning.
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Steps (epochs or episodes) between checkpoints.
    pub checkpoint_interval: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Steps between training-accuracy records in the log.
    pub log_interval: usize,
    pub augment: Vec<Augment>,
    pub seed: u64,
    /// Tag written into checkpoints.
    pub fingerprint: String,
}

impl TrainSchedule {
    /// RAdam at 1e-3 over mini-batches of 8.
    pub fn pretrain(epochs: usize, seed: u64) -> Self {
        TrainSchedule {
            phase: Phase::Pretrain,
            steps: epochs,
            batch_size: 8,
            optimizer: OptimizerConfig::radam(1e-3),
            checkpoint_interval: None,
            checkpoint_dir: None,
            log_interval: 1,
            augment: Vec::new(),
            seed,
            fingerprint: String::new(),
        }
    }

    /// Adam at 1e-3, one episode per step.
    pub fn meta_train(episodes: usize, seed: u64) -> Self {
        TrainSchedule {
            phase: Phase::MetaTrain,
            steps: episodes,
            batch_size: 1,
            optimizer: OptimizerConfig::adam(1e-3),
            log_interval: 100,
            ..Self::pretrain(episodes, seed)
        }
    }

    /// Full-batch Adam at 1e-2.
    pub fn fine_tune(iterations: usize, seed: u64) -> Self {
        TrainSchedule {
            phase: Phase::FineTune,
            steps: iterations,
            batch_size: 0,
            optimizer: OptimizerConfig::adam(1e-2),
            log_interval: iterations.max(1),
            ..Self::pretrain(iterations, seed)
        }
    }

    fn validate(&self, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Config(format!(
                "schedule is for {}, not {}",
                self.phase.name(),
                phase.name()
            )));
        }
        if self.steps == 0 && phase != Phase::FineTune {
            return Err(Error::Config(format!("{} needs a positive step count", phase.name())));
        }
        if phase == Phase::Pretrain && self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(i) = self.checkpoint_interval {
            if i == 0 || i > self.steps {
                return Err(Error::Config(format!(
                    "checkpoint interval {i} must lie in 1..={}",
                    self.steps
                )));
            }
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log interval must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Training accuracy over the interval ending at this step.
    pub accuracy: Option<f64>,
    /// Wall-clock seconds since the run started, recorded with accuracy.
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// `step,loss,accuracy,seconds`; the last two are blank between intervals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,accuracy,seconds\n");
        for r in &self.records {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            let sec = r.seconds.map(|s| format!("{s:.6}")).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.step, r.loss, acc, sec).unwrap();
        }
        out
    }

    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.step == b.step && a.loss.to_bits() == b.loss.to_bits() && a.accuracy == b.accuracy)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

struct Logger {
    log: TrainLog,
    start: Instant,
    correct: usize,
    total: usize,
    interval: usize,
}

impl Logger {
    fn new(interval: usize) -> Self {
        Logger {
            log: TrainLog::default(),
            start: Instant::now(),
            correct: 0,
            total: 0,
            interval,
        }
    }

    fn record(&mut self, step: usize, loss: f64, correct: usize, total: usize, force: bool) {
        self.correct += correct;
        self.total += total;
        let mut rec = StepRecord {
            step,
            loss,
            accuracy: None,
            seconds: None,
        };
        if force || (step + 1).is_multiple_of(self.interval) {
            rec.accuracy = Some(if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 });
            rec.seconds = Some(self.start.elapsed().as_secs_f64());
            self.correct = 0;
            self.total = 0;
        }
        self.log.records.push(rec);
    }
}

fn count_correct(scores: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(scores.row(*i)) == l)
        .count()
}

fn split_grads(grads: &Gradients, params: &ParamSet) -> Gradients {
    params
        .iter()
        .filter_map(|(name, _)| grads.get(name).map(|g| (name.clone(), g.clone())))
        .collect()
}

fn checkpoint_path(schedule: &TrainSchedule, step: usize) -> Option<PathBuf> {
    schedule.checkpoint_dir.as_ref().map(|d| {
        let tag = if schedule.fingerprint.is_empty() { "run" } else { &schedule.fingerprint };
        d.join(format!("checkpoint-{}-{tag}-{step:06}.json", schedule.phase.name()))
    })
}

/// Fresh classifier parameters for a baseline head over `n` classes.
pub fn init_classifier(kind: HeadKind, n_classes: usize, dim: usize, seed: u64) -> Result<ParamSet> {
    if !kind.is_baseline() {
        return Err(Error::Config(format!("{kind} has no trainable classifier")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
    let mut p = ParamSet::new();
    p.insert(HEAD_WEIGHT, Tensor::new(vec![n_classes, dim], draw(n_classes * dim))?);
    if kind == HeadKind::Baseline {
        p.insert(HEAD_BIAS, Tensor::new(vec![n_classes], draw(n_classes))?);
    }
    Ok(p)
}

fn classifier_logits(graph: &Graph, cfg: &HeadConfig, bound: &Bound, features: Var) -> Result<Var> {
    let w = bound[HEAD_WEIGHT];
    match cfg.kind {
        HeadKind::Baseline => tape::linear_logits(graph, w, bound[HEAD_BIAS], features),
        _ => tape::cosine_logits(graph, w, features, cfg.cosine_scale),
    }
}

/// Converts trained classifier parameters into a head state.
pub fn classifier_state(cfg: &HeadConfig, params: &ParamSet) -> Result<HeadState> {
    let weight = params
        .get(HEAD_WEIGHT)
        .cloned()
        .ok_or_else(|| Error::State("classifier has no weight".into()))?;
    match cfg.kind {
        HeadKind::Baseline => Ok(HeadState::Linear {
            weight,
            bias: params
                .get(HEAD_BIAS)
                .cloned()
                .ok_or_else(|| Error::State("linear classifier has no bias".into()))?,
        }),
        HeadKind::BaselinePp => Ok(HeadState::Cosine {
            weight,
            scale: cfg.cosine_scale,
        }),
        other => Err(Error::Config(format!("{other} has no trainable classifier"))),
    }
}

fn augmented_batch<R: Rng>(data: &DatasetTable, idx: &[usize], ops: &[Augment], rng: &mut R) -> Result<Tensor> {
    if ops.is_empty() || !data.is_image() {
        return Ok(data.batch(idx));
    }
    let mut out = Vec::with_capacity(idx.len() * data.input_len());
    for &i in idx {
        let x = augment(&data.items()[i].input, data.input_shape(), ops, rng)?;
        if x.len() != data.input_len() {
            return Err(Error::Config("crop augmentation must preserve the input size".into()));
        }
        out.extend(x);
    }
    Tensor::new(vec![idx.len(), data.input_len()], out)
}

/// Supervised pre-training of backbone plus linear or cosine classifier over
/// all base classes, minimising mean cross-entropy per mini-batch.
pub fn pretrain_baseline(
    mut backbone: Backbone,
    head: &HeadConfig,
    base: &DatasetTable,
    schedule: &TrainSchedule,
) -> Result<(Backbone, HeadState, TrainLog)> {
    schedule.validate(Phase::Pretrain)?;
    head.validate()?;
    if !head.kind.is_baseline() {
        return Err(Error::Config(format!("pre-training needs a baseline head, got {}", head.kind)));
    }
    if base.is_empty() {
        return Err(Error::Config("pre-training data is empty".into()));
    }
    let mut classifier = init_classifier(head.kind, base.n_classes(), backbone.embedding_dim(), schedule.seed ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut logger = Logger::new(usize::MAX);
    let mut last_checkpoint = None;
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut step = 0;
    for epoch in 0..schedule.steps {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(schedule.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let x = augmented_batch(base, idx, &schedule.augment, &mut rng)?;
            let labels = base.labels(idx);
            let g = Graph::new();
            let mut bound = backbone.bind(&g, true)?;
            bound.extend(classifier.bind(&g, true)?);
            let xv = g.constant(x);
            let features = backbone.forward(&g, &bound, xv)?;
            let logits = classifier_logits(&g, head, &bound, features)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let loss_value = g.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    last_checkpoint,
                });
            }
            let correct = count_correct(&g.value(logits), &labels);
            let grads = g.backward(loss)?;
            if !backbone.params.is_empty() {
                backbone.params.step(&split_grads(&grads, &backbone.params), &schedule.optimizer)?;
            }
            classifier.step(&split_grads(&grads, &classifier), &schedule.optimizer)?;
            let end_of_epoch = b + 1 == batches.len();
            logger.record(step, loss_value, correct, labels.len(), end_of_epoch && (epoch + 1) % schedule.log_interval == 0);
            step += 1;
        }
        if let (Some(every), Some(path)) = (schedule.checkpoint_interval, checkpoint_path(schedule, epoch + 1)) {
            if (epoch + 1) % every == 0 {
                let mut ckpt = Checkpoint::new(&schedule.fingerprint, Phase::Pretrain.name(), epoch + 1, backbone.clone());
                ckpt.head = Some(head.clone());
                ckpt.head_state = Some(classifier_state(head, &classifier)?);
                ckpt.save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    let state = classifier_state(head, &classifier)?;
    Ok((backbone, state, logger.log))
}

/// Output of [`meta_train`].
#[derive(Clone, Debug)]
pub struct MetaTrained {
    pub backbone: Backbone,
    /// Relation module, for the relation head only.
    pub relation: Option<ParamSet>,
    pub log: TrainLog,
}

/// Episodic training: each step samples an episode from `base`, fits the head
/// on the support embeddings, and takes one optimizer step on the mean query
/// loss through the backbone (and relation module).
#[allow(clippy::too_many_arguments)]
pub fn meta_train(
    head: &HeadConfig,
    mut backbone: Backbone,
    base: &DatasetTable,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    schedule: &TrainSchedule,
) -> Result<MetaTrained> {
    schedule.validate(Phase::MetaTrain)?;
    head.validate()?;
    if head.kind.is_baseline() {
        return Err(Error::Config(format!("{} is trained by pre-training, not meta-training", head.kind)));
    }
    let dim = backbone.embedding_dim();
    let mut relation = (head.kind == HeadKind::Relation)
        .then(|| heads::relation_init(dim, head.relation_hidden_for(dim), schedule.seed ^ 0x7e1a));
    let mut logger = Logger::new(schedule.log_interval);
    let mut last_checkpoint = None;
    for step in 0..schedule.steps {
        let mut rng = episode_rng(schedule.seed, step as u64);
        let ep = sample_episode(base, n_way, k_shot, n_query, &mut rng)?;
        let all: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
        let x = augmented_batch(base, &all, &schedule.augment, &mut rng)?;

        let g = Graph::new();
        let mut bound = backbone.bind(&g, true)?;
        if let Some(r) = &relation {
            bound.extend(r.bind(&g, true)?);
        }
        let xv = g.constant(x);
        let emb = backbone.forward(&g, &bound, xv)?;
        let ns = ep.support.len();
        let support = g.select_rows(emb, &(0..ns).collect::<Vec<_>>())?;
        let queries = g.select_rows(emb, &(ns..all.len()).collect::<Vec<_>>())?;
        let scores = tape::episode_scores(&g, head.kind, support, &ep.support_labels, n_way, queries, Some(&bound))?;
        let loss = tape::head_loss(&g, head, scores, &ep.query_labels)?;
        let loss_value = g.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                step,
                last_checkpoint,
            });
        }
        let correct = count_correct(&g.value(scores), &ep.query_labels);
        let grads = g.backward(loss)?;
        if !backbone.params.is_empty() {
            backbone.params.step(&split_grads(&grads, &backbone.params), &schedule.optimizer)?;
        }
        if let Some(r) = relation.as_mut() {
            r.step(&split_grads(&grads, r), &schedule.optimizer)?;
        }
        logger.record(step, loss_value, correct, ep.query.len(), step + 1 == schedule.steps);

        if let (Some(every), Some(path)) = (schedule.checkpoint_interval, checkpoint_path(schedule, step + 1)) {
            if (step + 1) % every == 0 {
                let mut ckpt = Checkpoint::new(&schedule.fingerprint, Phase::MetaTrain.name(), step + 1, backbone.clone());
                ckpt.head = Some(head.clone());
                ckpt.relation = relation.clone();
                ckpt.save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    Ok(MetaTrained {
        backbone,
        relation,
        log: logger.log,
    })
}

/// Trains a fresh linear or cosine classifier on the embedded support set
/// with the backbone frozen. `support` holds raw inputs.
pub fn fine_tune(backbone: &Backbone, head: &HeadConfig, support: &SupportSet, schedule: &TrainSchedule) -> Result<HeadState> {
    schedule.validate(Phase::FineTune)?;
    head.validate()?;
    let features = backbone.embed(support.features())?;
    let mut classifier = init_classifier(head.kind, support.n_way(), backbone.embedding_dim(), schedule.seed)?;
    for step in 0..schedule.steps {
        let g = Graph::new();
        let bound = classifier.bind(&g, true)?;
        let x = g.constant(features.clone());
        let logits = classifier_logits(&g, head, &bound, x)?;
        let loss = g.softmax_cross_entropy(logits, support.labels())?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::Divergence {
                step,
                last_checkpoint: None,
            });
        }
        let grads = g.backward(loss)?;
        classifier.step(&grads, &schedule.optimizer)?;
    }
    classifier_state(head, &classifier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{build_backbone, BackboneConfig};
    use crate::episodes::Item;

    fn two_blobs() -> DatasetTable {
        let mut items = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for c in 0..2 {
            for _ in 0..40 {
                let base = if c == 0 { -2.0 } else { 2.0 };
                items.push(Item {
                    input: vec![base + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    label: c,
                    domain: "blobs".into(),
                });
            }
        }
        DatasetTable::new(items, vec!["a".into(), "b".into()], "blobs", vec![2]).unwrap()
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let data = two_blobs();
        let backbone = build_backbone(BackboneConfig::Mlp { widths: vec![2, 4, 3] }, 0).unwrap();
        let mut sched = TrainSchedule::pretrain(2, 1);
        sched.optimizer.learning_rate = 0.0;
        sched.batch_size = data.len();
        let (trained, _, log) = pretrain_baseline(backbone.clone(), &HeadConfig::new(HeadKind::Baseline), &data, &sched).unwrap();
        let before: Vec<_> = backbone.params.iter().collect();
        let after: Vec<_> = trained.params.iter().collect();
        assert_eq!(before, after);
        let losses = log.losses();
        assert!(losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn fine_tune_with_zero_iterations_returns_initialisation() {
        let backbone = build_backbone(BackboneConfig::Identity { dim: 2 }, 0).unwrap();
        let support = SupportSet::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0, 1], 2).unwrap();
        let head = HeadConfig::new(HeadKind::Baseline);
        let state = fine_tune(&backbone, &head, &support, &TrainSchedule::fine_tune(0, 5)).unwrap();
        let expected = classifier_state(&head, &init_classifier(HeadKind::Baseline, 2, 2, 5).unwrap()).unwrap();
        assert_eq!(state, expected);
    }

    #[test]
    fn schedule_phase_is_checked() {
        let backbone = build_backbone(BackboneConfig::Identity { dim: 2 }, 0).unwrap();
        let head = HeadConfig::new(HeadKind::Baseline);
        let err = pretrain_baseline(backbone, &head, &two_blobs(), &TrainSchedule::meta_train(3, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut s = TrainSchedule::meta_train(3, 0);
        s.checkpoint_interval = Some(4);
        let backbone = build_backbone(BackboneConfig::Identity { dim: 2 }, 0).unwrap();
        assert!(meta_train(&HeadConfig::new(HeadKind::Proto), backbone, &two_blobs(), 2, 1, 1, &s).is_err());
    }
}
