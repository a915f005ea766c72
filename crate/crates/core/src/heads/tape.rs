//! Differentiable versions of the head computations, recorded on a
//! [`Graph`] so that episode losses can be backpropagated into the backbone
//! and the relation module.

use super::{HeadConfig, HeadKind, RelationLoss};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Bound, Graph, Tensor, Var};

pub const RELATION_W1: &str = "relation.w1";
pub const RELATION_B1: &str = "relation.b1";
pub const RELATION_W2: &str = "relation.w2";
pub const RELATION_B2: &str = "relation.b2";

/// Residual norms at or below this fraction of the largest centred sample
/// norm are treated as linearly dependent during Gram-Schmidt.
const GRAM_SCHMIDT_TOLERANCE: f64 = 1e-8;

fn get(bound: &Bound, name: &str) -> Result<Var> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::State(format!("parameter {name} not bound")))
}

/// `N x (N*K)` matrix whose row `c` averages (or sums) the class `c` rows.
fn class_pooling(labels: &[usize], n_way: usize, average: bool) -> Tensor {
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        counts[l] += 1;
    }
    let mut m = Tensor::zeros(&[n_way, labels.len()]);
    for (i, &l) in labels.iter().enumerate() {
        m.data_mut()[l * labels.len() + i] = if average { 1.0 / counts[l] as f64 } else { 1.0 };
    }
    m
}

/// `B x N` scores of queries against the classes in a support set.
pub fn episode_scores(
    graph: &Graph,
    kind: HeadKind,
    support: Var,
    labels: &[usize],
    n_way: usize,
    queries: Var,
    relation: Option<&Bound>,
) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_way) {
        return Err(Error::Index { index: bad, len: n_way });
    }
    match kind {
        HeadKind::Proto => {
            let avg = graph.constant(class_pooling(labels, n_way, true));
            let protos = graph.matmul(avg, support)?;
            graph.neg_squared_distance(queries, protos)
        }
        HeadKind::Matching => {
            let sim = graph.cosine_similarity(queries, support)?;
            let avg_t = graph.constant(class_pooling(labels, n_way, true).transpose()?);
            graph.add_scalar(graph.matmul(sim, avg_t)?, -1.0)
        }
        HeadKind::Subspace => subspace_scores(graph, support, labels, n_way, queries),
        HeadKind::Relation => {
            let bound = relation.ok_or_else(|| Error::State("relation head needs module parameters".into()))?;
            let sum = graph.constant(class_pooling(labels, n_way, false));
            let agg = graph.matmul(sum, support)?;
            relation_scores(graph, bound, agg, queries)
        }
        HeadKind::Baseline | HeadKind::BaselinePp => Err(Error::State(format!(
            "{kind} has no episodic scoring rule; use linear_logits or cosine_logits"
        ))),
    }
}

fn subspace_scores(graph: &Graph, support: Var, labels: &[usize], n_way: usize, queries: Var) -> Result<Var> {
    let mut columns = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let k = rows.len();
        let samples = graph.select_rows(support, &rows)?;
        let avg = graph.constant(Tensor::full(&[1, k], 1.0 / k as f64));
        let neg_mean = graph.scale(graph.matmul(avg, samples)?, -1.0)?;
        let centred = graph.add_row(samples, neg_mean)?;

        let centred_val = graph.value(centred);
        let largest = (0..k)
            .map(|i| centred_val.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let mut basis: Option<Var> = None;
        for i in 0..k {
            let mut v = graph.select_rows(centred, &[i])?;
            if let Some(b) = basis {
                let coeff = graph.matmul(v, graph.transpose(b)?)?;
                v = graph.sub(v, graph.matmul(coeff, b)?)?;
            }
            let norm_sq = graph.value(v).data().iter().map(|x| x * x).sum::<f64>();
            if largest == 0.0 || norm_sq.sqrt() <= GRAM_SCHMIDT_TOLERANCE * largest {
                continue;
            }
            let norm = graph.sqrt(graph.sum(graph.square(v)?)?)?;
            let unit = graph.div_by_scalar(v, norm)?;
            basis = Some(match basis {
                Some(b) => graph.concat_rows(&[b, unit])?,
                None => unit,
            });
        }

        let mut residual = graph.add_row(queries, neg_mean)?;
        if let Some(b) = basis {
            let coeff = graph.matmul(residual, graph.transpose(b)?)?;
            residual = graph.sub(residual, graph.matmul(coeff, b)?)?;
        }
        columns.push(graph.row_sum(graph.square(residual)?)?);
    }
    let mut out = columns[0];
    for &col in &columns[1..] {
        out = graph.concat_cols(out, col)?;
    }
    graph.scale(out, -1.0)
}

/// Relation module over every (query, class) pair: `B x N` scores in (0, 1).
pub fn relation_scores(graph: &Graph, bound: &Bound, class_features: Var, queries: Var) -> Result<Var> {
    let cshape = graph.shape(class_features);
    let qshape = graph.shape(queries);
    if cshape.len() != 2 || qshape.len() != 2 || cshape[1] != qshape[1] {
        return shape_err(format!("relation: classes {cshape:?} vs queries {qshape:?}"));
    }
    let (n, b) = (cshape[0], qshape[0]);
    let class_idx: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let query_idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let pairs = graph.concat_cols(
        graph.select_rows(class_features, &class_idx)?,
        graph.select_rows(queries, &query_idx)?,
    )?;
    let w1 = get(bound, RELATION_W1)?;
    if graph.shape(w1)[0] != graph.shape(pairs)[1] {
        return shape_err(format!(
            "relation module expects {}-dimensional pairs, got {}",
            graph.shape(w1)[0],
            graph.shape(pairs)[1]
        ));
    }
    let h = graph.relu(graph.add_row(graph.matmul(pairs, w1)?, get(bound, RELATION_B1)?)?)?;
    let out = graph.add_row(graph.matmul(h, get(bound, RELATION_W2)?)?, get(bound, RELATION_B2)?)?;
    graph.reshape(graph.sigmoid(out)?, &[b, n])
}

/// `x W^T + b` for `N x d` weights.
pub fn linear_logits(graph: &Graph, weight: Var, bias: Var, features: Var) -> Result<Var> {
    graph.add_row(graph.matmul(features, graph.transpose(weight)?)?, bias)
}

/// `scale * cos(x, w_c)` for `N x d` weight vectors.
pub fn cosine_logits(graph: &Graph, weight: Var, features: Var, scale: f64) -> Result<Var> {
    graph.scale(graph.cosine_similarity(features, weight)?, scale)
}

/// Mean loss over a batch of `B x N` scores. Cross-entropy for every head
/// except the relation head, which regresses scores onto one-hot targets
/// unless configured for cross-entropy.
pub fn head_loss(graph: &Graph, cfg: &HeadConfig, scores: Var, labels: &[usize]) -> Result<Var> {
    let shape = graph.shape(scores);
    let scores = if shape.len() == 1 { graph.reshape(scores, &[1, shape[0]])? } else { scores };
    let shape = graph.shape(scores);
    let (b, n) = (shape[0], shape[1]);
    if labels.len() != b {
        return shape_err(format!("{} labels for {b} score rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Index { index: bad, len: n });
    }
    if cfg.kind == HeadKind::Relation && cfg.relation_loss == RelationLoss::MeanSquared {
        let mut target = Tensor::zeros(&[b, n]);
        for (i, &l) in labels.iter().enumerate() {
            target.data_mut()[i * n + l] = 1.0;
        }
        let diff = graph.sub(scores, graph.constant(target))?;
        graph.mean(graph.square(diff)?)
    } else {
        graph.softmax_cross_entropy(scores, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{self, SupportSet};
    use crate::numerics::gradcheck::max_relative_error;
    use crate::numerics::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn tape_scores_agree_with_value_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k, d, b) = (4, 3, 6, 5);
        let support = random(&mut rng, n * k, d);
        let labels: Vec<usize> = (0..n * k).map(|i| i % n).collect();
        let queries = random(&mut rng, b, d);
        let set = SupportSet::new(support.clone(), labels.clone(), n).unwrap();
        let relation = heads::relation_init(d, 16, 1);
        for kind in [HeadKind::Proto, HeadKind::Matching, HeadKind::Subspace, HeadKind::Relation] {
            let g = Graph::new();
            let bound = relation.bind(&g, false).unwrap();
            let s = g.constant(support.clone());
            let q = g.constant(queries.clone());
            let scores = g.value(episode_scores(&g, kind, s, &labels, n, q, Some(&bound)).unwrap());
            let state = heads::fit(kind, &set, Some(&relation)).unwrap();
            for i in 0..b {
                let expected = state.score(queries.row(i)).unwrap();
                for (x, y) in scores.row(i).iter().zip(&expected) {
                    assert!((x - y).abs() < 1e-9, "{kind}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn episode_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, k, d) = (3, 3, 4);
        let labels: Vec<usize> = (0..n * k).map(|i| i / k).collect();
        let qlabels = vec![0, 1, 2, 1];
        for kind in [HeadKind::Proto, HeadKind::Matching, HeadKind::Subspace, HeadKind::Relation] {
            let mut params = ParamSet::new();
            params.insert("support", random(&mut rng, n * k, d));
            params.insert("queries", random(&mut rng, 4, d));
            let relation = heads::relation_init(d, 6, 2);
            for (name, t) in relation.iter() {
                params.insert(name.clone(), t.clone());
            }
            let cfg = HeadConfig::new(kind);
            let err = max_relative_error(&params, 1e-5, |g, bound| {
                let scores = episode_scores(g, kind, bound["support"], &labels, n, bound["queries"], Some(bound))?;
                head_loss(g, &cfg, scores, &qlabels)
            })
            .unwrap();
            assert!(err < 1e-4, "{kind}: relative error {err}");
        }
    }
}
