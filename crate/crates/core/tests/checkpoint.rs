use fat_core::checkpoint::*;
use fat_core::config::ExperimentConfig;
use fat_core::data::{generate_silo, generate_test_set, DatasetSpec};
use fat_core::experiment;
use fat_core::federation::{phase_of, AggregationMode};
use fat_core::model::{forward_inference, init_model, ArchDescriptor};
use fat_core::tensor::Tensor;
use fat_core::FatError;

fn probe() -> Tensor {
    let data = (0..2 * 16 * 16).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    Tensor::new(vec![2, 1, 16, 16], data).unwrap()
}

fn quick_cfg() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.experiment.total_rounds = 4;
    c.experiment.alternation_period = 1;
    c.experiment.eval_every = 2;
    c.local.epochs = 1;
    c.pretrain.rounds = 2;
    c
}

#[test]
fn save_load_preserves_forward_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let params = init_model(ArchDescriptor::default(), 12).unwrap();
    save_checkpoint(&path, &params, "unit test").unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.provenance, "unit test");
    assert_eq!(back.params, params);
    let a = forward_inference(&params, &probe()).unwrap();
    let b = forward_inference(&back.params, &probe()).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn any_flipped_byte_is_rejected() {
    let params = init_model(ArchDescriptor::new(1, 2, 3).unwrap(), 1).unwrap();
    let bytes = encode_checkpoint(&params, "p").unwrap();
    for pos in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(decode_checkpoint(&bad).is_err(), "flip at byte {pos} accepted");
    }
    let mut bad = bytes.clone();
    bad[40] ^= 1;
    match decode_checkpoint(&bad) {
        Err(FatError::Checkpoint(msg)) => assert!(msg.contains("hash"), "{msg}"),
        other => panic!("expected hash error, got {other:?}"),
    }
}

#[test]
fn descriptor_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &init_model(ArchDescriptor::new(1, 4, 3).unwrap(), 0).unwrap(), "").unwrap();
    assert!(matches!(
        load_checkpoint_for(&path, ArchDescriptor::default()),
        Err(FatError::Descriptor(_))
    ));
    assert!(load_checkpoint_for(&path, ArchDescriptor::new(1, 4, 3).unwrap()).is_ok());
}

#[test]
fn datasets_round_trip() {
    let spec = DatasetSpec::default();
    for silo in [generate_silo(&spec, 0).unwrap(), generate_silo(&spec, 3).unwrap(), generate_test_set(&spec).unwrap()] {
        let back = decode_dataset(&encode_dataset(&silo).unwrap()).unwrap();
        assert_eq!(back.silo_id(), silo.silo_id());
        assert_eq!(back.is_supervised(), silo.is_supervised());
        assert_eq!(back.images(), silo.images());
        assert_eq!(back.diagnostic_labels(), silo.diagnostic_labels());
        assert_eq!(back.training_labels().is_some(), silo.training_labels().is_some());
    }
}

#[test]
fn config_file_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let mut cfg = quick_cfg().with_mode(AggregationMode::WeightedRamp).with_seed(3);
    cfg.experiment.warmup_rounds = Some(2);
    cfg.save(&path).unwrap();
    let first = std::fs::read_to_string(&path).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded, cfg);
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), first);
}

#[test]
fn pretrain_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_cfg();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    experiment::cmd_pretrain(&cfg, &a).unwrap();
    experiment::cmd_pretrain(&cfg, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ck = load_checkpoint(&a).unwrap();
    assert!(ck.provenance.contains("rounds=2"));
}

#[test]
fn run_writes_schedule_echo_and_warm_start_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_cfg();
    cfg.experiment.total_rounds = 20;
    cfg.experiment.alternation_period = 5;
    cfg.experiment.eval_every = 1;
    let out = experiment::cmd_run(&cfg, &dir.path().join("run"), None, 1).unwrap();
    let csv = std::fs::read_to_string(&out.metrics_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), experiment::csv_header(3));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    for (t, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 9);
        assert_eq!(cols[0], t.to_string());
        assert_eq!(cols[1], phase_of(t, 5).as_str());
        assert_eq!(cols[2], "fat");
        assert_eq!(cols[8], "0");
    }
    assert!(load_checkpoint_for(&out.checkpoint_path, cfg.model).is_ok());

    // warm start: zero rounds of training leave the checkpoint untouched
    let ckpt = dir.path().join("pre.ckpt");
    let pre = experiment::cmd_pretrain(&cfg, &ckpt).unwrap();
    let mut warm = cfg.clone();
    warm.experiment.pretrain_checkpoint = Some(ckpt.clone());
    assert_eq!(experiment::initial_model(&warm).unwrap(), pre.params);
    let mut wrong = warm.clone();
    wrong.model.base_width = 4;
    assert!(experiment::initial_model(&wrong).is_err());
}

#[test]
fn exported_data_reproduces_the_generated_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_cfg();
    let data_dir = dir.path().join("data");
    experiment::cmd_export_data(&cfg, &data_dir).unwrap();
    let a = experiment::cmd_run(&cfg, &dir.path().join("a"), None, 1).unwrap();
    let b = experiment::cmd_run(&cfg, &dir.path().join("b"), Some(&data_dir), 1).unwrap();
    assert_eq!(std::fs::read(a.metrics_path).unwrap(), std::fs::read(b.metrics_path).unwrap());
    assert_eq!(std::fs::read(a.checkpoint_path).unwrap(), std::fs::read(b.checkpoint_path).unwrap());
}

#[test]
fn evaluate_reports_one_row_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_cfg();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &init_model(cfg.model, 0).unwrap(), "").unwrap();
    let rep = experiment::cmd_evaluate(&ckpt, &cfg, None).unwrap();
    assert_eq!(rep.dice.len(), cfg.model.n_classes);
    assert_eq!(rep.to_csv().lines().count(), 1 + cfg.model.n_classes);
    assert!(rep.dice.iter().all(|d| (0.0..=1.0).contains(d)));
}
