use stockconv::data::{prepare, PipelineOptions};
use stockconv::persist::{self, Checkpoint, PersistError};
use stockconv::synthetic::{self, SynthOptions};
use stockconv::train::{predict, train, TrainConfig};
use stockconv::{init_model, ModelConfig};

fn small_data() -> stockconv::Prepared {
    let series = synthetic::generate(&SynthOptions {
        rows: 800,
        seed: 4,
        ..SynthOptions::default()
    });
    let options = PipelineOptions {
        window_len: 8,
        ..PipelineOptions::default()
    };
    prepare(&series.frame, &options).unwrap()
}

#[test]
fn trained_checkpoint_reloads_with_identical_predictions() {
    let data = small_data();
    let model = init_model(ModelConfig::stack(4, 8, [4, 4, 4], [8, 8], 0.5), 2).unwrap();
    let config = TrainConfig {
        max_epochs: 2,
        batch_size: 100,
        ..TrainConfig::default()
    };
    let outcome = train(model, &data.train, Some(&data.test), &config).unwrap();
    let ckpt = Checkpoint {
        model: outcome.model.clone(),
        hyper: config.hyper,
        best_epoch: outcome.history.best_epoch,
        optimizer: Some(outcome.optimizer.clone()),
    };

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    persist::save_checkpoint(&path, &ckpt).unwrap();
    let back = persist::load_checkpoint(&path).unwrap();
    assert_eq!(back.model, outcome.model);
    assert_eq!(back.optimizer.as_ref(), Some(&outcome.optimizer));
    assert_eq!(back.best_epoch, ckpt.best_epoch);

    let a = predict(&outcome.model, &data.test).unwrap();
    let b = predict(&back.model, &data.test).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

    // Saving again reproduces the same bytes.
    let again = dir.path().join("again.ckpt");
    persist::save_checkpoint(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn sample_files_round_trip() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    persist::save_samples(&path, &data.train).unwrap();
    let back = persist::load_samples(&path).unwrap();
    assert_eq!(back.window_len, data.train.window_len);
    assert_eq!(back.labels(), data.train.labels());
    assert_eq!(back.samples[17].window, data.train.samples[17].window);
}

#[test]
fn wrong_file_kinds_are_rejected() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    persist::save_samples(&path, &data.train).unwrap();
    assert!(matches!(
        persist::load_checkpoint(&path),
        Err(PersistError::BadMagic { .. })
    ));
    let missing = persist::load_checkpoint(dir.path().join("absent.ckpt"));
    assert!(matches!(missing, Err(PersistError::Io { .. })));
}
