use arise_core::engine::{process_utterance, ArConfig};
use arise_core::estimator::CompactEstimator;
use arise_core::metrics::si_sdr;
use arise_core::train::toy::{toy_set, toy_stft};
use arise_core::train::{train, Method, RdsCache, TrainConfig};

#[test]
fn trained_checkpoint_survives_a_file_round_trip() {
    let scenes = toy_set(6, 21).unwrap();
    let data: Vec<_> = scenes.iter().map(|s| s.utterance.clone()).collect();
    let cfg = ArConfig::default();
    let mut est = CompactEstimator::random(2, 16, 1);
    let tcfg = TrainConfig {
        method: Method::Paris,
        epochs: 0,
        steps: 10,
        learning_rate: 0.01,
        batch: 3,
        seed: 2,
    };
    train(&mut est, &cfg, &tcfg, &data, &mut RdsCache::new(), |_| {}).unwrap();

    let dir = std::env::temp_dir().join(format!("arise-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    est.save(&path).unwrap();
    let loaded = CompactEstimator::load(&path).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();

    let mut rounded = est.clone();
    rounded.round_to_checkpoint();
    assert_eq!(loaded, rounded);

    let stft = toy_stft();
    let s = &scenes[0];
    let out = process_utterance(&cfg, &loaded, &s.utterance.mixture).unwrap();
    let wave = stft.synthesize_trimmed(&out, s.target_ref.len()).unwrap();
    assert_eq!(wave.len(), s.mixture_ref.len());
    assert!(si_sdr(&wave, &s.target_ref).unwrap().is_finite());
}
