use transmamba::checkpoint::{Record, MAGIC};
use transmamba::{Checkpoint, CliError, RunConfig};
use transmamba_core::model::{Model, ModelConfig};

fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.task.vocab = 8;
    cfg
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny_run();
    let model = Model::<f32>::new(cfg.model.clone(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tmam");
    Checkpoint::from_model(&cfg, &model.params).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);

    let (loaded_cfg, loaded) = Checkpoint::load(&path).unwrap().model::<f32>().unwrap();
    assert_eq!(loaded_cfg, cfg);
    for (a, b) in model.params.iter().zip(loaded.params.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &transmamba_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
}

#[test]
fn float64_records_round_trip() {
    let t = transmamba_core::Tensor::<f64>::new(vec![2, 2], vec![0.1, -1e-300, f64::MAX, 3.0]).unwrap();
    let r = Record::from_tensor("w", &t);
    assert_eq!(r.bytes.len(), 32);
    let ck = Checkpoint { config_text: "steps = 1\n".into(), records: vec![r] };
    let back = Checkpoint::decode(&ck.encode()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.records[0].to_tensor::<f64>().unwrap(), t);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = tiny_run();
    let model = Model::<f32>::new(cfg.model.clone(), 3).unwrap();
    let bytes = Checkpoint::from_model(&cfg, &model.params).encode();
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(CliError::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(CliError::Checkpoint(_))));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(Checkpoint::decode(&extra), Err(CliError::Checkpoint(_))));
}

#[test]
fn checkpoint_with_missing_tensor_fails_to_load() {
    let cfg = tiny_run();
    let model = Model::<f32>::new(cfg.model.clone(), 3).unwrap();
    let mut ck = Checkpoint::from_model(&cfg, &model.params);
    ck.records.pop();
    assert!(ck.model::<f32>().is_err());
}
