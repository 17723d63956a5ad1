use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensorcore::{check_gradients, Evaluation, OpKind};

fn probs(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

fn labels(ids: &[u32], tag: usize) -> LabelSequence {
    LabelSequence::new(ids.to_vec(), tag)
}

fn worked_example() -> (PosteriorStreams, Vec<LabelSequence>) {
    let post = PosteriorStreams::from_probabilities(vec![
        probs(&[&[0.8, 0.2]]),
        probs(&[&[0.3, 0.7]]),
    ])
    .unwrap();
    (post, vec![labels(&[0], 0), labels(&[1], 1)])
}

#[test]
fn pairwise_matrix_worked_example() {
    let (post, targets) = worked_example();
    let m = pairwise_ce_matrix(&post, &targets).unwrap();
    // −ln of 0.8, 0.2, 0.3, 0.7
    let want = [[0.2231, 1.6094], [1.2040, 0.3567]];
    for s in 0..2 {
        for u in 0..2 {
            assert!((m.costs.get(s, u) - want[s][u]).abs() < 5e-5);
        }
    }
    assert!((m.costs.get(0, 1) - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn identical_targets_give_identical_columns() {
    let post = PosteriorStreams::from_probabilities(vec![
        probs(&[&[0.6, 0.4], &[0.1, 0.9]]),
        probs(&[&[0.5, 0.5], &[0.25, 0.75]]),
    ])
    .unwrap();
    let t = labels(&[1, 0], 0);
    let m = pairwise_ce_matrix(&post, &[t.clone(), t]).unwrap();
    for s in 0..2 {
        assert_eq!(m.costs.get(s, 0), m.costs.get(s, 1));
    }
}

#[test]
fn uniform_posteriors_cost_t_ln_k() {
    let k = 5;
    let t = 7;
    let logits = vec![Matrix::zeros(t, k), Matrix::zeros(t, k)];
    let post = PosteriorStreams::from_logits(logits);
    let targets = [labels(&[0, 1, 2, 3, 4, 0, 1], 0), labels(&[4; 7], 1)];
    let m = pairwise_ce_matrix(&post, &targets).unwrap();
    for v in m.costs.as_slice() {
        assert!((v - t as f64 * (k as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn length_mismatch_is_rejected() {
    let (post, _) = worked_example();
    let bad = [labels(&[0, 1], 0), labels(&[1], 1)];
    assert!(matches!(
        pairwise_ce_matrix(&post, &bad),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        pairwise_ce_matrix(&post, &[labels(&[0], 0)]),
        Err(Error::Validation(_))
    ));
}

fn costs(rows: &[&[f64]]) -> CePairMatrix {
    CePairMatrix {
        costs: probs(rows),
        frame_count: 1,
    }
}

#[test]
fn best_assignment_examples() {
    let a = best_assignment(&costs(&[&[1.0, 2.0], &[3.0, 0.5]])).unwrap();
    assert_eq!(a.perm, vec![0, 1]);
    assert_eq!(a.cost, 1.5);
    // Enumerated alternative for the record: 2.0 + 3.0.
    assert_eq!(costs(&[&[1.0, 2.0], &[3.0, 0.5]]).assignment_cost(&[1, 0]), 5.0);

    let swapped = best_assignment(&costs(&[&[2.0, 1.0], &[0.5, 3.0]])).unwrap();
    assert_eq!(swapped.perm, vec![1, 0]);

    let single = best_assignment(&costs(&[&[4.2]])).unwrap();
    assert_eq!(single.perm, vec![0]);

    let tie = best_assignment(&costs(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
    assert_eq!(tie.perm, vec![0, 1]);
}

#[test]
fn best_assignment_size_guard() {
    let m = CePairMatrix {
        costs: Matrix::zeros(9, 9),
        frame_count: 1,
    };
    assert!(matches!(best_assignment(&m), Err(Error::Unsupported(_))));
}

#[test]
fn permutations_are_lexicographic_and_complete() {
    let all: Vec<_> = Permutations::new(3).collect();
    assert_eq!(
        all,
        vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0]
        ]
    );
    assert_eq!(Permutations::new(5).count(), 120);
    assert_eq!(Permutations::new(1).count(), 1);
}

#[test]
fn pit_loss_worked_example() {
    let (post, targets) = worked_example();
    let r = pit_loss(&post, &targets).unwrap();
    assert_eq!(r.assignment.perm, vec![0, 1]);
    assert!((r.assignment.cost - 0.5798).abs() < 1e-4);
    assert!((r.value - 0.2899).abs() < 1e-4);

    let swapped = pit_loss(&post, &[targets[1].clone(), targets[0].clone()]).unwrap();
    assert_eq!(swapped.value, r.value);
    assert_eq!(swapped.assignment.perm, vec![1, 0]);
}

#[test]
fn single_stream_is_mean_ce() {
    let logits = probs(&[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0], &[-0.5, 0.0, 0.5]]);
    let target = labels(&[2, 0, 1], 0);
    let (ce, _) = softmax_ce_rows(&logits, &target.senones).unwrap();
    let mean = ce.iter().sum::<f64>() / 3.0;
    let r = pit_loss(&PosteriorStreams::from_logits(vec![logits]), &[target]).unwrap();
    assert_eq!(r.value.to_bits(), mean.to_bits());
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    s: usize,
    t: usize,
    k: usize,
) -> (Vec<Matrix>, Vec<LabelSequence>) {
    let logits = (0..s)
        .map(|_| {
            let data = (0..t * k).map(|_| rng.random_range(-3.0..3.0)).collect();
            Matrix::from_vec(t, k, data).unwrap()
        })
        .collect();
    let targets = (0..s)
        .map(|u| {
            LabelSequence::new(
                (0..t).map(|_| rng.random_range(0..k as u32)).collect(),
                u,
            )
        })
        .collect();
    (logits, targets)
}

#[test]
fn graph_route_matches_value_route_and_counts_s_squared_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in 1..=3 {
        let (logits, targets) = random_instance(&mut rng, s, 6, 4);
        let mut g = Graph::new();
        let ids: Vec<_> = logits.iter().map(|m| g.param(m.clone())).collect();
        let (root, graph_result) = pit_loss_graph(&mut g, &ids, &targets).unwrap();
        let value_result = pit_loss(&PosteriorStreams::from_logits(logits), &targets).unwrap();
        assert_eq!(graph_result, value_result);
        assert!((g.value(root).get(0, 0) - value_result.value).abs() < 1e-15);
        assert_eq!(g.count(OpKind::SoftmaxCrossEntropy), s * s);
    }
}

#[test]
fn losing_pairs_receive_no_gradient() {
    // Head 0 strongly predicts target 1, head 1 target 0: swap wins.
    let logits = [
        probs(&[&[0.0, 5.0], &[0.0, 5.0]]),
        probs(&[&[5.0, 0.0], &[5.0, 0.0]]),
    ];
    let targets = [labels(&[0, 0], 0), labels(&[1, 1], 1)];
    let mut g = Graph::new();
    let ids: Vec<_> = logits.iter().map(|m| g.param(m.clone())).collect();
    let (root, r) = pit_loss_graph(&mut g, &ids, &targets).unwrap();
    assert_eq!(r.assignment.perm, vec![1, 0]);
    g.backward(root).unwrap();
    // Head 0 paired with target 1: gradient is (p − onehot(1)) / (S·T).
    let p = crate::tensorcore::row_softmax(&logits[0]);
    let grad = g.grad(ids[0]).unwrap();
    for t in 0..2 {
        assert!((grad.get(t, 0) - p.get(t, 0) / 4.0).abs() < 1e-15);
        assert!((grad.get(t, 1) - (p.get(t, 1) - 1.0) / 4.0).abs() < 1e-15);
    }
}

#[test]
fn analytic_gradient_matches_finite_differences_away_from_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (s, t, k) = (2, 4, 3);
    let mut checked = 0;
    while checked < 20 {
        let (logits, targets) = random_instance(&mut rng, s, t, k);
        let r = pit_loss(&PosteriorStreams::from_logits(logits.clone()), &targets).unwrap();
        let runner_up = Permutations::new(s)
            .filter(|p| *p != r.assignment.perm)
            .map(|p| r.per_pair.assignment_cost(&p))
            .fold(f64::INFINITY, f64::min);
        if runner_up - r.assignment.cost < 1e-3 {
            continue;
        }
        let theta: Vec<f64> = logits.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let f = |theta: &[f64]| -> crate::Result<Evaluation> {
            let mut g = Graph::new();
            let ids: Vec<_> = theta
                .chunks(t * k)
                .map(|c| g.param(Matrix::from_vec(t, k, c.to_vec()).unwrap()))
                .collect();
            let (root, result) = pit_loss_graph(&mut g, &ids, &targets)?;
            g.backward(root)?;
            let gradient = ids
                .iter()
                .flat_map(|&id| g.grad(id).unwrap().as_slice().to_vec())
                .collect();
            Ok(Evaluation {
                value: result.value,
                gradient,
            })
        };
        let report = check_gradients(f, &theta, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        checked += 1;
    }
}

fn permute<T: Clone>(items: &[T], order: &[usize]) -> Vec<T> {
    order.iter().map(|&i| items[i].clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn value_is_invariant_and_optimal(seed in any::<u64>(), s in 1usize..=3, t in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (logits, targets) = random_instance(&mut rng, s, t, 4);
        let base = pit_loss(&PosteriorStreams::from_logits(logits.clone()), &targets).unwrap();
        for order in Permutations::new(s) {
            let permuted_targets = permute(&targets, &order);
            let r = pit_loss(&PosteriorStreams::from_logits(logits.clone()), &permuted_targets).unwrap();
            prop_assert!((r.value - base.value).abs() <= 1e-12);
            let permuted_heads = permute(&logits, &order);
            let r = pit_loss(&PosteriorStreams::from_logits(permuted_heads), &targets).unwrap();
            prop_assert!((r.value - base.value).abs() <= 1e-12);
            let fixed = base.per_pair.assignment_cost(&order);
            prop_assert!(base.value * (s * t) as f64 <= fixed + 1e-12);
        }
    }
}
