use std::collections::BTreeSet;

use hcl_core::datio::{synth_stream, SynthSpec};
use hcl_core::engine::fewshot::{few_shot_eval, run_episodes, sample_episode, FewShotConfig};
use hcl_core::engine::{train_sequence, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained() -> (hcl_core::engine::ModelState, hcl_core::datio::EmbeddingDataset) {
    let spec = SynthSpec { tasks: 3, samples_per_class: 30, holdout_classes: 6, ..SynthSpec::default() };
    let out = synth_stream(21, &spec).unwrap();
    let (state, _) = train_sequence(&out.stream, &TrainConfig { epochs: 3, seed: 21, ..TrainConfig::default() }, &mut |_| {}).unwrap();
    (state, out.holdout.unwrap())
}

#[test]
fn episodes_are_disjoint_and_balanced() {
    let (_, pool) = trained();
    let cfg = FewShotConfig { n_way: 4, k_shot: 3, query_per_class: 5, ..FewShotConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ep = sample_episode(&pool, &cfg, &mut rng).unwrap();
    assert_eq!(ep.classes.len(), 4);
    assert!(ep.classes.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(ep.support.len(), 12);
    assert_eq!(ep.query.len(), 20);
    for &c in &ep.classes {
        assert_eq!(ep.support.iter().filter(|s| s.1 == c).count(), 3);
        assert_eq!(ep.query.iter().filter(|s| s.1 == c).count(), 5);
    }
    let support: BTreeSet<Vec<u64>> = ep.support.iter().map(|s| s.0.iter().map(|v| v.to_bits()).collect()).collect();
    assert!(ep.query.iter().all(|q| !support.contains(&q.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>())));

    let again = sample_episode(&pool, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(ep, again);

    let greedy = FewShotConfig { n_way: 7, ..cfg.clone() };
    assert!(sample_episode(&pool, &greedy, &mut rng).is_err());
    let too_many = FewShotConfig { k_shot: 40, ..cfg };
    assert!(sample_episode(&pool, &too_many, &mut rng).is_err());
}

#[test]
fn stream_classes_are_rejected() {
    let (state, _) = trained();
    let spec = SynthSpec { tasks: 3, samples_per_class: 30, ..SynthSpec::default() };
    let stream = synth_stream(21, &spec).unwrap().stream;
    let (train, _) = stream.to_datasets();
    let cfg = FewShotConfig { n_way: 2, k_shot: 2, query_per_class: 2, steps: 5, ..FewShotConfig::default() };
    let ep = sample_episode(&train, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(few_shot_eval(&state, &ep, &cfg, 0).is_err());
}

#[test]
fn holdout_episodes_beat_chance_and_shuffled_labels_do_not() {
    let (state, pool) = trained();
    let cfg = FewShotConfig { steps: 50, ..FewShotConfig::default() };
    let accs = run_episodes(&state, &pool, &cfg, 3, 10).unwrap();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(mean > 0.6, "{accs:?}");
    assert_eq!(accs, run_episodes(&state, &pool, &cfg, 3, 10).unwrap());

    let control = FewShotConfig { shuffle_query_labels: true, ..cfg };
    let accs = run_episodes(&state, &pool, &control, 3, 30).unwrap();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.2).abs() < 0.08, "{mean}");
}

#[test]
fn episode_adapter_and_bare_backbone_paths_run() {
    let (state, pool) = trained();
    for cfg in [
        FewShotConfig { steps: 10, use_shared_lora: false, ..FewShotConfig::default() },
        FewShotConfig { steps: 10, episode_adapter: true, ..FewShotConfig::default() },
        FewShotConfig { steps: 10, episode_adapter: true, use_shared_lora: false, ..FewShotConfig::default() },
    ] {
        let accs = run_episodes(&state, &pool, &cfg, 0, 2).unwrap();
        assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}
