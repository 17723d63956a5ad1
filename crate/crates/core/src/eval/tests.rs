use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::network::FeatureSequence;
use crate::pitloss::LabelSequence;
use crate::tensorcore::Matrix;

fn one_hot(ids: &[u32], k: usize) -> Matrix {
    let mut m = Matrix::zeros(ids.len(), k);
    for (t, &id) in ids.iter().enumerate() {
        m.set(t, id as usize, 1.0);
    }
    m
}

fn sample(targets: &[&[u32]], snr_db: f64) -> MixtureSample {
    let t = targets[0].len();
    MixtureSample {
        features: FeatureSequence::new(Matrix::zeros(t, 2), "u").unwrap(),
        targets: targets
            .iter()
            .enumerate()
            .map(|(u, ids)| LabelSequence::new(ids.to_vec(), u))
            .collect(),
        snr_db,
        speakers: (0..targets.len() as u32).collect(),
        high_energy_speaker: 0,
        original_lengths: vec![t; targets.len()],
        stream: None,
    }
}

fn oracle(s: &MixtureSample, k: usize) -> PosteriorStreams {
    PosteriorStreams::from_logits(s.targets.iter().map(|t| one_hot(&t.senones, k)).collect())
}

#[test]
fn frame_decode_examples() {
    let post = PosteriorStreams::from_logits(vec![
        one_hot(&[3, 1], 5),
        Matrix::zeros(2, 5),
    ]);
    assert_eq!(frame_decode(&post), vec![vec![3, 1], vec![0, 0]]);
}

#[test]
fn collapse_examples() {
    assert_eq!(collapse_tokens(&[0, 3, 3, 0, 5]), vec![3, 5]);
    assert_eq!(collapse_tokens(&[0, 0, 0]), Vec::<u32>::new());
    assert_eq!(collapse_tokens(&[2, 2, 0, 2]), vec![2, 2]);
}

#[test]
fn edit_distance_examples() {
    assert_eq!(edit_distance(b"AB", b"AB"), 0);
    assert_eq!(edit_distance(b"", b"ABC"), 3);
    assert_eq!(edit_distance(b"ABC", b"AC"), 1);
    assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
}

#[test]
fn pairwise_examples() {
    let a = vec![1, 2, 3];
    let b = vec![4, 4, 4];
    let swapped = pairwise_score(&[b.clone(), a.clone()], &[a.clone(), b.clone()], Metric::Frame).unwrap();
    assert_eq!(swapped.perm, vec![1, 0]);
    assert_eq!(swapped.total, 0);

    let single = pairwise_score(&[vec![1, 2]], &[vec![1, 3]], Metric::Frame).unwrap();
    assert_eq!((single.perm, single.errors), (vec![0], vec![1]));

    // d(X,A)=1, d(Y,B)=2, d(X,B)=3, d(Y,A)=4: identity wins with 3 vs 7.
    let x = vec![1, 1, 1, 9];
    let y = vec![2, 2, 8, 8];
    let refs = [vec![1, 1, 1, 1], vec![2, 2, 2, 2]];
    assert_eq!(frame_errors(&x, &refs[1]).unwrap(), 4);
    let r = pairwise_score(&[x, y], &refs, Metric::Frame).unwrap();
    assert_eq!(r.perm, vec![0, 1]);
    assert_eq!(r.errors, vec![1, 2]);

    assert!(matches!(
        pairwise_score(&[vec![1]], &refs, Metric::Frame),
        Err(Error::Validation(_))
    ));
}

#[test]
fn perfect_oracle_scores_zero() {
    let samples = [
        sample(&[&[0, 1, 1, 2, 0], &[0, 3, 3, 3, 0]], 0.0),
        sample(&[&[0, 2, 2, 2, 0], &[0, 0, 1, 1, 0]], 5.0),
    ];
    let post: Vec<_> = samples.iter().map(|s| oracle(s, 4)).collect();
    let report = score_posteriors(&post, &samples, ScoreMode::Pit).unwrap();
    let totals = report.totals();
    assert_eq!(totals.frame_errors, 0);
    assert_eq!(totals.token_errors, 0);
    assert_eq!(totals.utterances, 2);

    // Swapped heads still score zero in pairwise mode.
    let swapped: Vec<_> = post
        .iter()
        .map(|p| PosteriorStreams::from_logits(vec![p.logits[1].clone(), p.logits[0].clone()]))
        .collect();
    let report = score_posteriors(&swapped, &samples, ScoreMode::Pit).unwrap();
    assert_eq!(report.totals().frame_errors, 0);
}

#[test]
fn single_head_on_mixture_scores_each_reference() {
    let s = sample(&[&[0, 1, 1, 0], &[0, 2, 3, 0]], 10.0);
    let post = PosteriorStreams::from_logits(vec![one_hot(&[0, 1, 1, 0], 4)]);
    let rows = score_utterance(&post, &s, ScoreMode::SingleOnMix).unwrap();
    assert_eq!(rows[0].0, Role::HighEnergy);
    assert_eq!(rows[0].1.frame_errors, 0);
    assert_eq!(rows[1].0, Role::LowEnergy);
    assert_eq!(rows[1].1.frame_errors, 2);
    assert_eq!(rows[1].1.token_errors, 2);
}

#[test]
fn single_on_clean_is_plain_single_stream_scoring() {
    let mut s = sample(&[&[0, 1, 2, 2, 0]], 15.0);
    s.stream = Some(1);
    let post = PosteriorStreams::from_logits(vec![one_hot(&[0, 1, 1, 2, 3], 4)]);
    let rows = score_utterance(&post, &s, ScoreMode::SingleOnClean).unwrap();
    let hyp = frame_decode(&post);
    let direct = pairwise_score(&hyp, &[s.targets[0].senones.clone()], Metric::Frame).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, Role::LowEnergy);
    assert_eq!(rows[0].1.frame_errors, direct.total);
}

#[test]
fn random_posteriors_beat_single_stream_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = 8;
    let mut samples = Vec::new();
    let mut post = Vec::new();
    for _ in 0..400 {
        let t = 30;
        let refs: Vec<Vec<u32>> = (0..2)
            .map(|_| (0..t).map(|_| rng.random_range(0..k as u32)).collect())
            .collect();
        samples.push(sample(&[&refs[0], &refs[1]], 0.0));
        post.push(PosteriorStreams::from_logits(
            (0..2)
                .map(|_| {
                    let data = (0..t * k).map(|_| rng.random::<f64>()).collect();
                    Matrix::from_vec(t, k, data).unwrap()
                })
                .collect(),
        ));
    }
    let report = score_posteriors(&post, &samples, ScoreMode::Pit).unwrap();
    let fer = report.totals().frame_error_rate();
    assert!(fer < 0.875, "{fer}");
    assert!(fer > 0.8, "{fer}");
}

#[test]
fn report_has_one_row_per_snr_and_role() {
    let snrs = [0.0, 5.0, 10.0, 15.0, 20.0];
    let samples: Vec<_> = snrs
        .iter()
        .flat_map(|&snr| [sample(&[&[0, 1], &[2, 0]], snr), sample(&[&[1, 1], &[2, 2]], snr)])
        .collect();
    let post: Vec<_> = samples.iter().map(|s| oracle(s, 3)).collect();
    let report = score_posteriors(&post, &samples, ScoreMode::Pit).unwrap();
    assert_eq!(report.cells.len(), 10);
    assert_eq!(report.snrs(), snrs.to_vec());
    let csv = report.to_csv();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[0], "snr_db,role,frame_error_rate,token_error_rate,utterances");
    assert_eq!(lines[1], "0,high_e,0.000000,0.000000,2");
    assert_eq!(lines[2], "0,low_e,0.000000,0.000000,2");
    assert_eq!(lines[11], "all,all,0.000000,0.000000,10");
    assert_eq!(report.cell(20.0, Role::LowEnergy).unwrap().utterances, 2);
}

#[test]
fn score_mode_parses() {
    assert_eq!("pit".parse::<ScoreMode>().unwrap(), ScoreMode::Pit);
    assert_eq!("single-on-mix".parse::<ScoreMode>().unwrap(), ScoreMode::SingleOnMix);
    assert_eq!("single-on-clean".parse::<ScoreMode>().unwrap(), ScoreMode::SingleOnClean);
    assert!("both".parse::<ScoreMode>().is_err());
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(0u32..4, 0..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn edit_distance_is_a_metric(a in tokens(), b in tokens(), c in tokens()) {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }

    #[test]
    fn pairwise_total_never_exceeds_identity(
        seed in any::<u64>(),
        s in 1usize..=3,
        token in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<u32> { (0..6).map(|_| rng.random_range(0..3)).collect() };
        let hyps: Vec<_> = (0..s).map(|_| draw()).collect();
        let refs: Vec<_> = (0..s).map(|_| draw()).collect();
        let metric = if token { Metric::Token } else { Metric::Frame };
        let r = pairwise_score(&hyps, &refs, metric).unwrap();
        let identity: usize = hyps.iter().zip(&refs).map(|(h, x)| distance(h, x, metric).unwrap()).sum();
        prop_assert!(r.total <= identity);
        prop_assert_eq!(r.errors.iter().sum::<usize>(), r.total);
        let self_score = pairwise_score(&refs, &refs, metric).unwrap();
        prop_assert_eq!(self_score.total, 0);
    }
}
