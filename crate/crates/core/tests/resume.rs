use std::fs;

use semicircle_core::nn::Checkpoint;
use semicircle_core::synth::{generate, GeneratorSpec};
use semicircle_core::train::{default_config, resume, run, Mode, Scale};

#[test]
fn interrupted_run_resumes_bit_exactly() {
    let data = generate(&GeneratorSpec {
        count: 400,
        ..Default::default()
    })
    .unwrap();
    let whole = tempfile::tempdir().unwrap();
    let mut config = default_config(Mode::Supervised, Scale::Desk);
    config.checkpoint_every = 500;
    config.out_dir = Some(whole.path().to_path_buf());
    let uninterrupted = run(&config, &data).unwrap();

    let mid = Checkpoint::load(whole.path().join("stage2_iter500.ckpt")).unwrap();
    assert!(mid.optimizer.is_some());
    assert_eq!(mid.metadata["progress.stage_index"], "1");
    assert_eq!(mid.metadata["progress.iteration"], "500");

    let rest = tempfile::tempdir().unwrap();
    config.out_dir = Some(rest.path().to_path_buf());
    let resumed = resume(&mid, &config, &data).unwrap();
    assert_eq!(resumed.model, uninterrupted.model);
    assert_eq!(
        fs::read(whole.path().join("final.ckpt")).unwrap(),
        fs::read(rest.path().join("final.ckpt")).unwrap()
    );
    let tail: Vec<_> = uninterrupted
        .log
        .records
        .iter()
        .filter(|r| r.stage > 2 || (r.stage == 2 && r.iteration >= 500))
        .collect();
    assert_eq!(tail, resumed.log.records.iter().collect::<Vec<_>>());
}
