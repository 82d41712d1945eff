use pacnn::geometry::{generate_dataset, SceneConfig};
use pacnn::io::{read_dataset, write_dataset};
use pacnn::metrics::evaluate;
use pacnn::model::{CombineMode, ModelConfig};
use pacnn::train::{checkpoint_id, prepare_samples, train_phase1, train_phase2, TrainConfig};
use pacnn::Model32;

fn small() -> TrainConfig {
    TrainConfig {
        epochs_phase1: 2,
        epochs_phase2: 2,
        crops_per_image: 2,
        model: ModelConfig {
            block_widths: [4, 4, 8, 8],
            block_depths: [1, 1, 1, 1],
            perspective_width: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_round_trip_preserves_scenes() {
    let scenes = generate_dataset(&SceneConfig::default(), 9, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &scenes).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), scenes);
}

#[test]
fn two_phase_training_and_checkpoint_reload() {
    let scenes = generate_dataset(&SceneConfig::default(), 2, 4).unwrap();
    let cfg = small();
    let (samples, norm, warnings) = prepare_samples(&scenes, &cfg).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(samples.len(), 4 * 2);
    let mut lines = Vec::new();
    let mut log = |e: &pacnn::train::EpochLog| lines.push(e.to_line());
    let (m1, _) = train_phase1(&samples, &cfg, Some(&mut log)).unwrap();
    let (m2, _) = train_phase2(&samples, &cfg, &m1, Some(&mut log)).unwrap();
    assert_eq!(lines.len(), 4);
    assert_ne!(checkpoint_id(&m1), checkpoint_id(&m2));

    let mut bytes = Vec::new();
    m2.params.write_checkpoint(&mut bytes).unwrap();
    let back = Model32::load_checkpoint(cfg.model.clone(), bytes.as_slice()).unwrap();
    let (a, _) = evaluate(&m2, &scenes, CombineMode::Pa, &norm).unwrap();
    let (b, _) = evaluate(&back, &scenes, CombineMode::Pa, &norm).unwrap();
    assert_eq!(a, b);
}
