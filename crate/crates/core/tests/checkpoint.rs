mod common;

use compground::splitter::Split;
use compground::train::{Checkpoint, Prepared, Trainer};
use compground::Error;

use common::{tiny_data, tiny_run, tiny_trainer};

fn predictions(trainer: &Trainer, data: &Prepared) -> Vec<(f64, f64)> {
    (0..data.len())
        .map(|i| {
            let (v, q) = data.item(i);
            trainer.model.predict(v, q).unwrap()
        })
        .collect()
}

fn bits(xs: &[(f64, f64)]) -> Vec<(u64, u64)> {
    xs.iter().map(|(a, b)| (a.to_bits(), b.to_bits())).collect()
}

#[test]
fn fresh_model_roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let (trainer, data) = tiny_trainer(&run);
    let path = dir.path().join("ck.json");
    trainer.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, trainer.checkpoint());
    let restored = Trainer::from_checkpoint(loaded).unwrap();
    assert_eq!(bits(&predictions(&trainer, &data)), bits(&predictions(&restored, &data)));
}

#[test]
fn mid_training_roundtrip_gives_identical_next_step() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let (mut trainer, data) = tiny_trainer(&run);
    trainer.train_epoch(&data).unwrap();
    let path = dir.path().join("ck.json");
    trainer.checkpoint().save(&path).unwrap();
    let mut restored = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();

    let batch: Vec<usize> = (0..data.len().min(4)).collect();
    let a = trainer.train_step(&data, &batch).unwrap();
    let b = restored.train_step(&data, &batch).unwrap();
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert_eq!(a, b);
    assert_eq!(trainer.checkpoint(), restored.checkpoint());
}

#[test]
fn resumed_epochs_match_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let (mut straight, data) = tiny_trainer(&run);
    straight.train_epoch(&data).unwrap();
    straight.train_epoch(&data).unwrap();

    let (mut first, _) = tiny_trainer(&run);
    first.train_epoch(&data).unwrap();
    let path = dir.path().join("ck.json");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    resumed.train_epoch(&data).unwrap();
    assert_eq!(straight.checkpoint(), resumed.checkpoint());
}

#[test]
fn corrupted_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let (trainer, _) = tiny_trainer(&run);
    let path = dir.path().join("ck.json");
    trainer.checkpoint().save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    let truncated = dir.path().join("truncated.json");
    std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&truncated), Err(Error::Checkpoint(_))));

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["version"] = serde_json::json!(99);
    let wrong = dir.path().join("version.json");
    std::fs::write(&wrong, value.to_string()).unwrap();
    assert!(matches!(Checkpoint::load(&wrong), Err(Error::Checkpoint(_))));

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["surprise"] = serde_json::json!(1);
    let extra = dir.path().join("extra.json");
    std::fs::write(&extra, value.to_string()).unwrap();
    assert!(matches!(Checkpoint::load(&extra), Err(Error::Checkpoint(_))));
}

#[test]
fn mismatched_layouts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let (trainer, _) = tiny_trainer(&run);
    let mut ck = trainer.checkpoint();
    let mut other = tiny_run(dir.path());
    other.model.d = 4;
    let data = tiny_data(&other);
    let train = &data.splits[&Split::Training];
    let small = Trainer::new(other, train.videos[0].frame_dim().unwrap(), trainer.model.vocab.clone()).unwrap();
    ck.target = small.target;
    assert!(matches!(Trainer::from_checkpoint(ck), Err(Error::Checkpoint(_))));
}
