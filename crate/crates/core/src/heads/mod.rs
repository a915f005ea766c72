//! Few-shot classification heads.
//!
//! Every head turns a support set of embeddings into per-class scores for a
//! query embedding. Metric heads (prototype, matching, subspace) are fitted
//! in closed form; the linear and cosine classifiers are fitted by
//! `training::fine_tune`; the relation head carries a learned module.
//! Argmax ties always resolve to the lowest class index.

pub mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    argmax, dot, orthonormal_basis, project_residual, squared_distance, squared_norm, Graph, ParamSet, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Baseline,
    BaselinePp,
    Matching,
    Proto,
    Relation,
    Subspace,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] = [
        HeadKind::Baseline,
        HeadKind::BaselinePp,
        HeadKind::Proto,
        HeadKind::Matching,
        HeadKind::Relation,
        HeadKind::Subspace,
    ];

    /// Heads whose per-episode classifier is trained by fine-tuning.
    pub fn is_baseline(self) -> bool {
        matches!(self, HeadKind::Baseline | HeadKind::BaselinePp)
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Baseline => "baseline",
            HeadKind::BaselinePp => "baseline_pp",
            HeadKind::Matching => "matching",
            HeadKind::Proto => "proto",
            HeadKind::Relation => "relation",
            HeadKind::Subspace => "subspace",
        }
    }

    /// Display label used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            HeadKind::Baseline => "Baseline",
            HeadKind::BaselinePp => "Baseline++",
            HeadKind::Matching => "MatchingNet",
            HeadKind::Proto => "ProtoNet",
            HeadKind::Relation => "RelationNet",
            HeadKind::Subspace => "SubspaceNet",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '+'], "_");
        match norm.as_str() {
            "baseline" => Ok(HeadKind::Baseline),
            "baseline_pp" | "baseline__" | "baselinepp" => Ok(HeadKind::BaselinePp),
            "matching" | "matchingnet" => Ok(HeadKind::Matching),
            "proto" | "protonet" => Ok(HeadKind::Proto),
            "relation" | "relationnet" => Ok(HeadKind::Relation),
            "subspace" | "subspacenet" => Ok(HeadKind::Subspace),
            _ => Err(Error::Config(format!("unknown head {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationLoss {
    MeanSquared,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Multiplier on cosine similarities in the cosine classifier.
    pub cosine_scale: f64,
    /// Hidden width of the relation module; `None` means `8 * d`.
    pub relation_hidden: Option<usize>,
    pub relation_loss: RelationLoss,
    pub fine_tune_iterations: usize,
    pub fine_tune_lr: f64,
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        HeadConfig {
            kind,
            cosine_scale: 2.0,
            relation_hidden: None,
            relation_loss: RelationLoss::MeanSquared,
            fine_tune_iterations: 100,
            fine_tune_lr: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cosine_scale > 0.0) {
            return Err(Error::Config("cosine scale must be positive".into()));
        }
        if self.relation_hidden == Some(0) {
            return Err(Error::Config("relation hidden width must be positive".into()));
        }
        if !(self.fine_tune_lr >= 0.0) {
            return Err(Error::Config("fine-tune learning rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn relation_hidden_for(&self, dim: usize) -> usize {
        self.relation_hidden.unwrap_or(8 * dim)
    }
}

/// Support embeddings with exactly `k_shot` rows per class `0..n_way`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    features: Tensor,
    labels: Vec<usize>,
    n_way: usize,
    k_shot: usize,
}

impl SupportSet {
    pub fn new(features: Tensor, labels: Vec<usize>, n_way: usize) -> Result<Self> {
        if features.ndim() != 2 || features.rows() != labels.len() {
            return shape_err(format!(
                "support features {:?} for {} labels",
                features.shape(),
                labels.len()
            ));
        }
        if n_way == 0 || labels.is_empty() {
            return shape_err("support set needs at least one class and one item");
        }
        let mut counts = vec![0usize; n_way];
        for &l in &labels {
            if l >= n_way {
                return Err(Error::Index { index: l, len: n_way });
            }
            counts[l] += 1;
        }
        let k_shot = counts[0];
        if k_shot == 0 || counts.iter().any(|&c| c != k_shot) {
            return shape_err(format!("support must hold the same positive count per class, got {counts:?}"));
        }
        Ok(SupportSet {
            features,
            labels,
            n_way,
            k_shot,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn k_shot(&self) -> usize {
        self.k_shot
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices belonging to class `c`, in support order.
    pub fn class_rows(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }

    fn class_mean(&self, c: usize) -> Vec<f64> {
        let rows = self.class_rows(c);
        let mut mean = vec![0.0; self.dim()];
        for &r in &rows {
            for (m, x) in mean.iter_mut().zip(self.features.row(r)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        mean
    }
}

fn check_dim(expected: usize, query: &[f64]) -> Result<()> {
    if query.len() != expected {
        return shape_err(format!("query has dimension {}, head expects {expected}", query.len()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSubspace {
    pub mean: Vec<f64>,
    /// Orthonormal `d x r` basis of the centred class samples.
    pub basis: Tensor,
}

/// Relation module parameters plus per-class aggregated support features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationState {
    pub params: ParamSet,
    pub class_features: Tensor,
}

/// A fitted per-episode classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadState {
    Prototypes { prototypes: Tensor },
    Exemplars { support: SupportSet },
    Linear { weight: Tensor, bias: Tensor },
    Cosine { weight: Tensor, scale: f64 },
    Subspaces { classes: Vec<ClassSubspace> },
    Relation(RelationState),
}

impl HeadState {
    pub fn n_way(&self) -> usize {
        match self {
            HeadState::Prototypes { prototypes } => prototypes.rows(),
            HeadState::Exemplars { support } => support.n_way(),
            HeadState::Linear { weight, .. } | HeadState::Cosine { weight, .. } => weight.rows(),
            HeadState::Subspaces { classes } => classes.len(),
            HeadState::Relation(r) => r.class_features.rows(),
        }
    }

    /// Per-class scores for one query; larger means more likely.
    pub fn score(&self, query: &[f64]) -> Result<Vec<f64>> {
        match self {
            HeadState::Prototypes { .. } => proto_score(self, query),
            HeadState::Exemplars { support } => matching_score(support, query),
            HeadState::Linear { weight, bias } => linear_softmax_score(weight, bias, query),
            HeadState::Cosine { weight, scale } => cosine_classifier_score(weight, query, *scale),
            HeadState::Subspaces { .. } => subspace_score(self, query),
            HeadState::Relation(r) => relation_score_aggregated(&r.params, &r.class_features, query),
        }
    }

    pub fn predict(&self, query: &[f64]) -> Result<usize> {
        Ok(argmax(&self.score(query)?))
    }
}

pub fn proto_fit(support: &SupportSet) -> HeadState {
    let d = support.dim();
    let mut data = Vec::with_capacity(support.n_way() * d);
    for c in 0..support.n_way() {
        data.extend(support.class_mean(c));
    }
    HeadState::Prototypes {
        prototypes: Tensor::new(vec![support.n_way(), d], data).expect("prototype shape"),
    }
}

/// `logit_c = -||q - prototype_c||^2`.
pub fn proto_score(state: &HeadState, query: &[f64]) -> Result<Vec<f64>> {
    let HeadState::Prototypes { prototypes } = state else {
        return Err(Error::State("proto_score needs a prototype state".into()));
    };
    check_dim(prototypes.cols(), query)?;
    Ok((0..prototypes.rows())
        .map(|c| -squared_distance(query, prototypes.row(c)))
        .collect())
}

/// `logit_c = -mean_k (1 - cos(q, s_ck))`.
pub fn matching_score(support: &SupportSet, query: &[f64]) -> Result<Vec<f64>> {
    check_dim(support.dim(), query)?;
    let qn = squared_norm(query).sqrt();
    if qn == 0.0 {
        return Err(Error::Degenerate("query embedding has zero norm".into()));
    }
    let mut logits = vec![0.0; support.n_way()];
    for (i, &label) in support.labels().iter().enumerate() {
        let s = support.features().row(i);
        let sn = squared_norm(s).sqrt();
        if sn == 0.0 {
            return Err(Error::Degenerate(format!("support embedding {i} has zero norm")));
        }
        logits[label] -= 1.0 - dot(query, s) / (qn * sn);
    }
    let k = support.k_shot() as f64;
    Ok(logits.into_iter().map(|l| l / k).collect())
}

/// Class mean plus an orthonormal basis of the centred class samples.
pub fn subspace_fit(support: &SupportSet) -> Result<HeadState> {
    let d = support.dim();
    let mut classes = Vec::with_capacity(support.n_way());
    for c in 0..support.n_way() {
        let rows = support.class_rows(c);
        let mean = support.class_mean(c);
        let k = rows.len();
        // d x k matrix of centred samples as columns.
        let mut cols = vec![0.0; d * k];
        for (j, &r) in rows.iter().enumerate() {
            for i in 0..d {
                cols[i * k + j] = support.features().get2(r, i) - mean[i];
            }
        }
        let basis = orthonormal_basis(&Tensor::new(vec![d, k], cols)?)?;
        classes.push(ClassSubspace { mean, basis });
    }
    Ok(HeadState::Subspaces { classes })
}

/// `logit_c = -||(q - mu_c) - B_c B_c^T (q - mu_c)||^2`.
pub fn subspace_score(state: &HeadState, query: &[f64]) -> Result<Vec<f64>> {
    let HeadState::Subspaces { classes } = state else {
        return Err(Error::State("subspace_score needs a subspace state".into()));
    };
    classes
        .iter()
        .map(|cls| {
            check_dim(cls.mean.len(), query)?;
            let centred: Vec<f64> = query.iter().zip(&cls.mean).map(|(q, m)| q - m).collect();
            Ok(-project_residual(&cls.basis, &centred)?)
        })
        .collect()
}

/// `logits = W q + b` with `W` of shape `N x d`.
pub fn linear_softmax_score(weight: &Tensor, bias: &Tensor, query: &[f64]) -> Result<Vec<f64>> {
    if weight.ndim() != 2 || bias.len() != weight.rows() {
        return shape_err(format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()));
    }
    check_dim(weight.cols(), query)?;
    Ok((0..weight.rows())
        .map(|c| dot(weight.row(c), query) + bias.data()[c])
        .collect())
}

/// `logit_c = scale * cos(w_c, q)`.
pub fn cosine_classifier_score(weight: &Tensor, query: &[f64], scale: f64) -> Result<Vec<f64>> {
    if weight.ndim() != 2 {
        return shape_err(format!("weight vectors must be N x d, got {:?}", weight.shape()));
    }
    check_dim(weight.cols(), query)?;
    let qn = squared_norm(query).sqrt();
    if qn == 0.0 {
        return Err(Error::Degenerate("query embedding has zero norm".into()));
    }
    (0..weight.rows())
        .map(|c| {
            let w = weight.row(c);
            let wn = squared_norm(w).sqrt();
            if wn == 0.0 {
                return Err(Error::Degenerate(format!("weight vector {c} has zero norm")));
            }
            Ok(scale * dot(w, query) / (wn * qn))
        })
        .collect()
}

/// Fresh relation module for `dim`-dimensional embeddings.
pub fn relation_init(dim: usize, hidden: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut uniform = |shape: &[usize], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect()).unwrap()
    };
    p.insert(tape::RELATION_W1, uniform(&[2 * dim, hidden], 2 * dim));
    p.insert(tape::RELATION_B1, uniform(&[hidden], 2 * dim));
    p.insert(tape::RELATION_W2, uniform(&[hidden, 1], hidden));
    p.insert(tape::RELATION_B2, uniform(&[1], hidden));
    p
}

/// Elementwise sum of each class's support features (`N x d`).
pub fn relation_aggregate(support: &SupportSet) -> Tensor {
    let d = support.dim();
    let mut out = Tensor::zeros(&[support.n_way(), d]);
    for (i, &l) in support.labels().iter().enumerate() {
        for (o, x) in out.row_mut(l).iter_mut().zip(support.features().row(i)) {
            *o += x;
        }
    }
    out
}

pub fn relation_fit(params: &ParamSet, support: &SupportSet) -> HeadState {
    HeadState::Relation(RelationState {
        params: params.clone(),
        class_features: relation_aggregate(support),
    })
}

/// Relation scores in `(0, 1)` for one query against each class.
pub fn relation_score(params: &ParamSet, support: &SupportSet, query: &[f64]) -> Result<Vec<f64>> {
    relation_score_aggregated(params, &relation_aggregate(support), query)
}

fn relation_score_aggregated(params: &ParamSet, class_features: &Tensor, query: &[f64]) -> Result<Vec<f64>> {
    check_dim(class_features.cols(), query)?;
    let g = Graph::new();
    let bound = params.bind(&g, false)?;
    let agg = g.constant(class_features.clone());
    let q = g.constant(Tensor::new(vec![1, query.len()], query.to_vec())?);
    let scores = tape::relation_scores(&g, &bound, agg, q)?;
    Ok(g.value(scores).into_data())
}

/// Closed-form fit for the metric heads. Linear and cosine classifiers need
/// `training::fine_tune`, and the relation head needs its module.
pub fn fit(kind: HeadKind, support: &SupportSet, relation: Option<&ParamSet>) -> Result<HeadState> {
    match kind {
        HeadKind::Proto => Ok(proto_fit(support)),
        HeadKind::Matching => Ok(HeadState::Exemplars {
            support: support.clone(),
        }),
        HeadKind::Subspace => subspace_fit(support),
        HeadKind::Relation => {
            let params = relation.ok_or_else(|| Error::State("relation head needs module parameters".into()))?;
            Ok(relation_fit(params, support))
        }
        HeadKind::Baseline | HeadKind::BaselinePp => Err(Error::State(format!(
            "{kind} heads are fitted by fine-tuning"
        ))),
    }
}

/// Scalar training loss for one query's scores, as a plain value.
pub fn head_loss_value(cfg: &HeadConfig, scores: &[f64], label: usize) -> Result<f64> {
    let g = Graph::new();
    let s = g.constant(Tensor::new(vec![1, scores.len()], scores.to_vec())?);
    let l = tape::head_loss(&g, cfg, s, &[label])?;
    Ok(g.scalar(l))
}
