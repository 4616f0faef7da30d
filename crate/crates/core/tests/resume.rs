//! Interrupted runs resumed from `last.ckpt` reproduce an uninterrupted run byte for byte.

use std::path::Path;

use rpd_core::pipeline::{write_toy_splits, Checkpoint, DatasetManifest, Preset, RunConfig, TrainData, Trainer};

fn setup(dir: &Path) -> (RunConfig, TrainData) {
    let mut run = RunConfig::preset(Preset::Tiny);
    run.seed = 4;
    run.train.epochs = 3;
    let splits = write_toy_splits(&dir.join("data"), 3, 1, run.model.classes, 4).unwrap();
    let src = DatasetManifest::read(&splits.source_train).unwrap();
    let tgt = DatasetManifest::read(&splits.target_train).unwrap();
    let data = TrainData::load(&run, &src, &tgt).unwrap();
    (run, data)
}

fn outputs(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    (std::fs::read(dir.join("log.jsonl")).unwrap(), std::fs::read(dir.join("final.ckpt")).unwrap())
}

fn finish_from_last(dir: &Path, data: &TrainData) {
    let ck = Checkpoint::load(&dir.join("last.ckpt")).unwrap();
    Trainer::resume(ck, dir).unwrap().run(data).unwrap();
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (run, data) = setup(tmp.path());

    let whole = tmp.path().join("whole");
    Trainer::new(run.clone(), &whole).unwrap().run(&data).unwrap();
    let expected = outputs(&whole);

    let mid_stage1 = tmp.path().join("mid_stage1");
    let mut t = Trainer::new(run.clone(), &mid_stage1).unwrap();
    t.stage1_epoch(&data).unwrap();
    drop(t);
    finish_from_last(&mid_stage1, &data);
    assert_eq!(outputs(&mid_stage1), expected);

    let between = tmp.path().join("between_stages");
    let mut t = Trainer::new(run, &between).unwrap();
    t.stage1(&data).unwrap();
    drop(t);
    finish_from_last(&between, &data);
    assert_eq!(outputs(&between), expected);
}
