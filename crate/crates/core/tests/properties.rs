use fewshot_core::heads::{self, HeadKind, SupportSet};
use fewshot_core::numerics::{orthonormal_basis, project, project_residual, squared_norm, Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn cross_entropy_ignores_logit_shift(logits in prop::collection::vec(-10.0f64..10.0, 2..8), shift in -50.0f64..50.0, pick in 0usize..8) {
        let label = pick % logits.len();
        let ce = |l: Vec<f64>| {
            let g = Graph::new();
            let v = g.constant(Tensor::new(vec![1, l.len()], l).unwrap());
            let loss = g.softmax_cross_entropy(v, &[label]).unwrap();
            g.scalar(loss)
        };
        let shifted = logits.iter().map(|x| x + shift).collect();
        let (a, b) = (ce(logits), ce(shifted));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-10 * (1.0 + a));
    }

    #[test]
    fn projection_is_idempotent_and_orthogonal(m in matrix(6, 3), v in prop::collection::vec(-5.0f64..5.0, 6)) {
        let basis = orthonormal_basis(&m).unwrap();
        let p = project(&basis, &v).unwrap();
        let pp = project(&basis, &p).unwrap();
        for (a, b) in p.iter().zip(&pp) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let r = project_residual(&basis, &v).unwrap();
        prop_assert!(r >= 0.0 && r <= squared_norm(&v) + 1e-12);
        prop_assert!((r + squared_norm(&p) - squared_norm(&v)).abs() < 1e-8 * (1.0 + squared_norm(&v)));
    }

    #[test]
    fn one_shot_subspace_equals_proto(feat in matrix(4, 5), q in prop::collection::vec(-5.0f64..5.0, 5)) {
        let support = SupportSet::new(feat, vec![0, 1, 2, 3], 4).unwrap();
        let proto = heads::fit(HeadKind::Proto, &support, None).unwrap().score(&q).unwrap();
        let sub = heads::fit(HeadKind::Subspace, &support, None).unwrap().score(&q).unwrap();
        prop_assert_eq!(proto, sub);
    }
}
