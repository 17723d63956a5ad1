use proptest::prelude::*;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::*;
use crate::network::init_params;

fn tiny_config(streams: usize) -> ModelConfig {
    ModelConfig {
        feat_dim: 5,
        hidden_dim: 4,
        num_layers: 1,
        num_streams: streams,
        num_senones: 4,
        seed: 3,
    }
}

/// Utterances whose frames encode their labels: target stream `u` adds a
/// bump at dimension `label` scaled by `1/(u+1)`.
fn toy_samples(n: usize, streams: usize, seed: u64) -> Vec<MixtureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = rng.random_range(5..9);
            let targets: Vec<LabelSequence> = (0..streams)
                .map(|u| LabelSequence::new((0..t).map(|_| rng.random_range(0..4)).collect(), u))
                .collect();
            let mut frames = Matrix::zeros(t, 5);
            for (u, target) in targets.iter().enumerate() {
                for (f, &k) in target.senones.iter().enumerate() {
                    let v = frames.get(f, k as usize) + 1.0 / (u + 1) as f64;
                    frames.set(f, k as usize, v);
                }
            }
            for v in frames.as_mut_slice() {
                *v += rng.random_range(-0.1..0.1);
            }
            MixtureSample {
                features: FeatureSequence::new(frames, format!("toy{i}")).unwrap(),
                targets,
                snr_db: 0.0,
                speakers: (0..streams as u32).collect(),
                high_energy_speaker: 0,
                original_lengths: vec![t; streams],
                stream: None,
            }
        })
        .collect()
}

fn params_with(values: &[f64]) -> ModelParams {
    let mut p = ModelParams::zeros(&tiny_config(2)).unwrap();
    let mut flat = p.to_flat();
    flat[..values.len()].copy_from_slice(values);
    p.set_flat(&flat).unwrap();
    p
}

fn single_grad(params: &ModelParams, index: usize, value: f64) -> Gradients {
    let mut g = Gradients::zeros_like(params);
    let mut offset = 0;
    for m in &mut g.tensors {
        if index < offset + m.len() {
            m.as_mut_slice()[index - offset] = value;
            break;
        }
        offset += m.len();
    }
    g
}

#[test]
fn clip_examples() {
    let p = params_with(&[]);
    let mut g = single_grad(&p, 0, 0.001);
    clip_gradients(&mut g, 0.0003, ClipMode::Element).unwrap();
    assert_eq!(g.tensors[0].as_slice()[0], 0.0003);

    let mut g = single_grad(&p, 0, -0.00001);
    clip_gradients(&mut g, 0.0003, ClipMode::Element).unwrap();
    assert_eq!(g.tensors[0].as_slice()[0], -0.00001);

    let mut g = Gradients::zeros_like(&p);
    clip_gradients(&mut g, 0.0003, ClipMode::Element).unwrap();
    assert_eq!(g.max_abs(), 0.0);

    assert!(clip_gradients(&mut g, 0.0, ClipMode::Element).is_err());
}

#[test]
fn norm_clipping_rescales() {
    let p = params_with(&[]);
    let mut g = single_grad(&p, 0, 3.0);
    g.add_assign(&single_grad(&p, 1, 4.0)).unwrap();
    clip_gradients(&mut g, 1.0, ClipMode::Norm).unwrap();
    assert!((g.l2_norm() - 1.0).abs() < 1e-15);
    assert!((g.tensors[0].as_slice()[0] - 0.6).abs() < 1e-15);
}

#[test]
fn sgd_examples() {
    let mut p = params_with(&[1.0]);
    let g = single_grad(&p, 0, 2.0);
    sgd_step(&mut p, &g, 0.1).unwrap();
    assert!((p.to_flat()[0] - 0.8).abs() < 1e-15);

    let before = p.clone();
    sgd_step(&mut p, &Gradients::zeros_like(&before), 0.1).unwrap();
    assert_eq!(p, before);

    // Two steps on f(θ) = θ², gradient 2θ.
    let mut p = params_with(&[1.0]);
    for _ in 0..2 {
        let theta = p.to_flat()[0];
        let g = single_grad(&p, 0, 2.0 * theta);
        sgd_step(&mut p, &g, 0.1).unwrap();
    }
    assert!((p.to_flat()[0] - 0.64).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_names_the_parameter_and_leaves_params_alone() {
    let mut p = params_with(&[1.0]);
    let before = p.clone();
    let index = p.tensors()[0].len() + 2;
    let g = single_grad(&p, index, f64::NAN);
    let err = sgd_step(&mut p, &g, 0.1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("layer0.fwd.recurrent_weight"), "{msg}");
    assert_eq!(p, before);
}

#[test]
fn partial_minibatch_makes_one_step() {
    let samples = toy_samples(3, 2, 1);
    let mut params = init_params(&tiny_config(2)).unwrap();
    let before = params.clone();
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let report = train(&mut params, &samples, &[], &config).unwrap();
    assert_eq!(report.epochs.len(), 1);

    // One averaged step over all three utterances.
    let mut manual = before.clone();
    let batch: Vec<&MixtureSample> = samples.iter().collect();
    // Shuffled order changes only the summation order of three terms.
    minibatch_step(&mut manual, &batch, &config, config.learning_rate).unwrap();
    for (a, b) in manual.to_flat().iter().zip(params.to_flat()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn accumulating_single_utterances_equals_one_minibatch() {
    let samples = toy_samples(8, 2, 2);
    let params = init_params(&tiny_config(2)).unwrap();
    let config = TrainConfig::default();

    let mut acc = GradientAccumulator::new(&params);
    for s in &samples {
        let (r, g) = utterance_gradient(&params, &s.features, &s.targets).unwrap();
        acc.add(r.value, &g).unwrap();
    }
    let (_, mut grads) = acc.take_mean().unwrap();
    clip_gradients(&mut grads, config.clip_threshold, config.clip_mode).unwrap();
    let mut one_by_one = params.clone();
    sgd_step(&mut one_by_one, &grads, 0.05).unwrap();

    let mut batched = params.clone();
    let batch: Vec<&MixtureSample> = samples.iter().collect();
    minibatch_step(&mut batched, &batch, &config, 0.05).unwrap();
    assert_eq!(one_by_one.to_flat(), batched.to_flat());
    assert_eq!(acc.count(), 0);
}

#[test]
fn parallel_workers_give_identical_updates() {
    let samples = toy_samples(8, 2, 4);
    let params = init_params(&tiny_config(2)).unwrap();
    let batch: Vec<&MixtureSample> = samples.iter().collect();
    let run = |workers| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .unwrap();
        pool.install(|| minibatch_gradient(&params, &batch)).unwrap()
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn training_loss_decreases() {
    let samples = toy_samples(20, 2, 5);
    let mut params = init_params(&tiny_config(2)).unwrap();
    let config = TrainConfig {
        learning_rate: 2.0,
        epochs: 10,
        min_improvement: 0.0,
        ..TrainConfig::default()
    };
    let report = train(&mut params, &samples, &samples[..5], &config).unwrap();
    let first = report.epochs[0].train_loss;
    let last = report.epochs[9].train_loss;
    assert!(last < first, "{first} -> {last}");
}

fn checkpoint_digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn replay_is_deterministic() {
    let samples = toy_samples(10, 2, 6);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut params = init_params(&tiny_config(2)).unwrap();
        let config = TrainConfig {
            epochs: 3,
            learning_rate: 0.5,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let report = train(&mut params, &samples, &samples[..3], &config).unwrap();
        let digest = checkpoint_digest(report.final_checkpoint.as_ref().unwrap());
        let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        let losses: Vec<_> = report
            .epochs
            .iter()
            .map(|e| (e.train_loss, e.heldout_loss))
            .collect();
        (losses, digest, log.lines().count())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, 3);
}

#[test]
fn log_lines_have_four_tab_separated_fields() {
    let report = TrainReport {
        epochs: vec![EpochRecord {
            epoch: 2,
            train_loss: 1.5,
            heldout_loss: Some(1.25),
            learning_rate: 0.05,
            seconds: 0.5,
        }],
        final_checkpoint: None,
    };
    assert_eq!(report.log_lines(), "2\t1.500000\t1.250000\t0.500\n");
}

#[test]
fn single_stream_loss_is_plain_pit_loss() {
    let samples = toy_samples(5, 1, 7);
    let params = init_params(&tiny_config(1)).unwrap();
    for s in &samples {
        let (r, _) = utterance_gradient(&params, &s.features, &s.targets).unwrap();
        let direct = pit_loss(&forward(&params, &s.features).unwrap(), &s.targets).unwrap();
        assert_eq!(r.value.to_bits(), direct.value.to_bits());
    }
    let mut two_heads = init_params(&tiny_config(2)).unwrap();
    assert!(train_baseline(&mut two_heads, &samples, &[], &TrainConfig::default()).is_err());
}

#[test]
fn incompatible_corpus_is_rejected() {
    let samples = toy_samples(3, 1, 8);
    let mut params = init_params(&tiny_config(2)).unwrap();
    assert!(matches!(
        train(&mut params, &samples, &[], &TrainConfig::default()),
        Err(Error::Validation(_))
    ));
    let bad = TrainConfig {
        minibatch_utterances: 0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn tiny_model_gradient_check_passes() {
    let report = pit_gradient_check(7).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipping_is_idempotent_and_bounded(
        values in proptest::collection::vec(-1e-2f64..1e-2, 8),
        threshold in 1e-5f64..1e-2,
        norm in any::<bool>(),
    ) {
        let p = params_with(&[]);
        let mut g = Gradients::zeros_like(&p);
        g.tensors[0].as_mut_slice()[..8].copy_from_slice(&values);
        let mode = if norm { ClipMode::Norm } else { ClipMode::Element };
        clip_gradients(&mut g, threshold, mode).unwrap();
        let once = g.clone();
        clip_gradients(&mut g, threshold, mode).unwrap();
        prop_assert_eq!(&g, &once);
        match mode {
            ClipMode::Element => prop_assert!(g.max_abs() <= threshold),
            ClipMode::Norm => prop_assert!(g.l2_norm() <= threshold * (1.0 + 1e-12)),
        }
    }
}
