//! Meta-testing over novel-class episodes.

use std::fmt::Write as _;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::fingerprint;
use crate::embeddings::Backbone;
use crate::episodes::{check_capacity, episode_rng, sample_episode, DatasetTable};
use crate::error::{Error, Result};
use crate::heads::{self, HeadConfig, HeadState, SupportSet};
use crate::numerics::{argmax, ParamSet, Tensor};
use crate::training::{fine_tune, TrainSchedule};

pub const CI95_METHOD: &str = "normal approximation over episode accuracies: 1.96 * sample std / sqrt(n)";

/// Episode shape and count for a meta-test run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaTestConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default. Does not affect results.
    #[serde(skip)]
    pub threads: usize,
}

impl MetaTestConfig {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize, episodes: usize, seed: u64) -> Self {
        MetaTestConfig {
            n_way,
            k_shot,
            n_query,
            episodes,
            seed,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95_half_width: f64,
    pub ci95_method: String,
    pub per_episode_accuracy: Vec<f64>,
    /// Row is the true episode class, column the prediction.
    pub confusion: Vec<Vec<u64>>,
    pub precision: Vec<f64>,
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn fingerprint(&self) -> Option<&str> {
        self.config.get("fingerprint").and_then(|v| v.as_str())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Confusion matrix with a header row of predicted classes.
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = String::from("true\\pred");
        for c in 0..n {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Checks the aggregate invariants: mean and trace agree with the
    /// per-episode accuracies, every row holds `episodes * Q` predictions and
    /// precision is diagonal over column sum.
    pub fn check_invariants(&self, n_query: usize) -> Result<()> {
        let bad = |m: String| Err(Error::State(m));
        if self.per_episode_accuracy.len() != self.n_episodes {
            return bad("episode count does not match the accuracy list".into());
        }
        let mean = self.per_episode_accuracy.iter().sum::<f64>() / self.n_episodes as f64;
        if (mean - self.mean_accuracy).abs() > 1e-12 {
            return bad(format!("mean {} differs from recomputed {mean}", self.mean_accuracy));
        }
        let n = self.confusion.len();
        let per_row = (self.n_episodes * n_query) as u64;
        let mut total = 0;
        let mut trace = 0;
        for (t, row) in self.confusion.iter().enumerate() {
            if row.len() != n {
                return bad("confusion matrix is not square".into());
            }
            let s: u64 = row.iter().sum();
            if s != per_row {
                return bad(format!("confusion row {t} sums to {s}, expected {per_row}"));
            }
            total += s;
            trace += row[t];
        }
        if total > 0 && (trace as f64 / total as f64 - self.mean_accuracy).abs() > 1e-12 {
            return bad(format!("trace/total {} differs from mean {}", trace as f64 / total as f64, self.mean_accuracy));
        }
        let (_, precision, _) = confusion_and_precision_from_matrix(&self.confusion);
        if precision != self.precision {
            return bad("precision does not match the confusion matrix".into());
        }
        Ok(())
    }
}

/// `1.96 * s / sqrt(n)` with the sample standard deviation `s`.
pub fn confidence_half_width(accuracies: &[f64]) -> Result<f64> {
    let n = accuracies.len();
    if n < 2 {
        return Err(Error::Config(format!("a confidence interval needs at least 2 values, got {n}")));
    }
    // The rounded mean of equal values can miss them by an ulp.
    if accuracies.iter().all(|&a| a == accuracies[0]) {
        return Ok(0.0);
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Confusion matrix, per-class precision and classes with undefined precision.
pub type ConfusionSummary = (Vec<Vec<u64>>, Vec<f64>, Vec<usize>);

fn confusion_and_precision_from_matrix(m: &[Vec<u64>]) -> ConfusionSummary {
    let n = m.len();
    let mut precision = vec![0.0; n];
    let mut undefined = Vec::new();
    for (p, slot) in precision.iter_mut().enumerate() {
        let col: u64 = m.iter().map(|row| row[p]).sum();
        if col == 0 {
            undefined.push(p);
        } else {
            *slot = m[p][p] as f64 / col as f64;
        }
    }
    (m.to_vec(), precision, undefined)
}

/// Confusion counts (`[true][predicted]`), per-class precision, and the
/// classes whose precision is undefined (reported as 0).
pub fn confusion_and_precision(predictions: &[usize], truth: &[usize], n: usize) -> Result<ConfusionSummary> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0u64; n]; n];
    for (&p, &t) in predictions.iter().zip(truth) {
        for v in [p, t] {
            if v >= n {
                return Err(Error::Index { index: v, len: n });
            }
        }
        m[t][p] += 1;
    }
    Ok(confusion_and_precision_from_matrix(&m))
}

/// `"40.77% ± 0.89%"` for mean 0.4077 and half-width 0.0089.
pub fn format_cell(mean: f64, half_width: f64) -> String {
    format!("{:.2}% ± {:.2}%", mean * 100.0, half_width * 100.0)
}

struct EpisodeOutcome {
    accuracy: f64,
    predictions: Vec<usize>,
    truth: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn fit_episode_head(
    backbone: &Backbone,
    head: &HeadConfig,
    relation: Option<&ParamSet>,
    raw_support: Tensor,
    features: Tensor,
    labels: Vec<usize>,
    n_way: usize,
    fine_tune_seed: u64,
) -> Result<HeadState> {
    if head.kind.is_baseline() {
        let support = SupportSet::new(raw_support, labels, n_way)?;
        let mut schedule = TrainSchedule::fine_tune(head.fine_tune_iterations, fine_tune_seed);
        schedule.optimizer.learning_rate = head.fine_tune_lr;
        fine_tune(backbone, head, &support, &schedule)
    } else {
        heads::fit(head.kind, &SupportSet::new(features, labels, n_way)?, relation)
    }
}

fn run_episode(
    backbone: &Backbone,
    head: &HeadConfig,
    relation: Option<&ParamSet>,
    novel: &DatasetTable,
    cfg: &MetaTestConfig,
    index: usize,
) -> Result<EpisodeOutcome> {
    let mut rng = episode_rng(cfg.seed, index as u64);
    let ep = sample_episode(novel, cfg.n_way, cfg.k_shot, cfg.n_query, &mut rng)?;
    let fine_tune_seed = rng.next_u64();
    let all: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
    let raw = novel.batch(&all);
    let emb = backbone.embed(&raw)?;
    let ns = ep.support.len();
    let support_idx: Vec<usize> = (0..ns).collect();
    let state = fit_episode_head(
        backbone,
        head,
        relation,
        raw.select_rows(&support_idx),
        emb.select_rows(&support_idx),
        ep.support_labels.clone(),
        cfg.n_way,
        fine_tune_seed,
    )?;
    let mut predictions = Vec::with_capacity(ep.query.len());
    for qi in 0..ep.query.len() {
        let scores = state.score(emb.row(ns + qi))?;
        predictions.push(argmax(&scores));
    }
    let correct = predictions.iter().zip(&ep.query_labels).filter(|(p, t)| p == t).count();
    Ok(EpisodeOutcome {
        accuracy: correct as f64 / ep.query.len() as f64,
        predictions,
        truth: ep.query_labels,
    })
}

/// Runs `cfg.episodes` episodes on `novel`. Baseline heads fine-tune a fresh
/// classifier on every support set; metric heads fit in closed form. The
/// report does not depend on `cfg.threads`.
pub fn meta_test(
    backbone: &Backbone,
    head: &HeadConfig,
    relation: Option<&ParamSet>,
    novel: &DatasetTable,
    cfg: &MetaTestConfig,
) -> Result<EvalReport> {
    head.validate()?;
    if cfg.episodes < 2 {
        return Err(Error::Config(format!(
            "meta-testing needs at least 2 episodes for a confidence interval, got {}",
            cfg.episodes
        )));
    }
    check_capacity(novel, cfg.n_way, cfg.k_shot, cfg.n_query)?;
    if head.kind == heads::HeadKind::Relation && relation.is_none() {
        return Err(Error::State("relation head needs module parameters".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<EpisodeOutcome> = pool.install(|| {
        (0..cfg.episodes)
            .into_par_iter()
            .map(|i| run_episode(backbone, head, relation, novel, cfg, i))
            .collect::<Result<Vec<_>>>()
    })?;

    let per_episode_accuracy: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let mean_accuracy = per_episode_accuracy.iter().sum::<f64>() / cfg.episodes as f64;
    let ci95_half_width = confidence_half_width(&per_episode_accuracy)?;
    let predictions: Vec<usize> = outcomes.iter().flat_map(|o| o.predictions.iter().copied()).collect();
    let truth: Vec<usize> = outcomes.iter().flat_map(|o| o.truth.iter().copied()).collect();
    let (confusion, precision, undefined) = confusion_and_precision(&predictions, &truth, cfg.n_way)?;
    let flags = undefined
        .into_iter()
        .map(|c| format!("precision undefined for class {c}: no predictions, reported as 0"))
        .collect();

    let mut config = json!({
        "head": head,
        "backbone": backbone.config,
        "backbone_checksum": format!("{:016x}", backbone.params.checksum()),
        "relation_checksum": relation.map(|r| format!("{:016x}", r.checksum())),
        "dataset": novel.domain_name(),
        "n_way": cfg.n_way,
        "k_shot": cfg.k_shot,
        "n_query": cfg.n_query,
        "episodes": cfg.episodes,
        "seed": cfg.seed,
    });
    let fp = fingerprint(&config);
    config["fingerprint"] = json!(fp);

    Ok(EvalReport {
        config,
        n_episodes: cfg.episodes,
        mean_accuracy,
        ci95_half_width,
        ci95_method: CI95_METHOD.into(),
        per_episode_accuracy,
        confusion,
        precision,
        flags,
    })
}
