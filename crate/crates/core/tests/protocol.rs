use std::fs;
use std::path::Path;

use mdrive::checkpoint;
use mdrive::eval;
use mdrive::metrics::{read_predictions, write_predictions};
use mdrive::model::{Model, ModelConfig};
use mdrive::scenes::dataset::{generate_split, read_dataset, write_dataset, Split};
use mdrive::scenes::SceneSample;
use mdrive::train::{corpus_vocab, prepare_examples, train, TrainConfig};

fn corpus(n: u32) -> Vec<SceneSample> {
    generate_split(5, Split::Train, n, 8)
}

fn tiny_model(samples: &[SceneSample], frozen: bool) -> Model {
    let mut cfg = ModelConfig::tiny();
    cfg.encoder.frozen = frozen;
    Model::new(cfg, corpus_vocab(samples), 1).unwrap()
}

fn tc(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 3,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn group_bytes(model: &Model, prefix: &str) -> Vec<u32> {
    model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn frozen_encoder_survives_training_bit_for_bit() {
    let samples = corpus(6);
    let mut model = tiny_model(&samples, true);
    let ex = prepare_examples(&model, &samples).unwrap();
    let enc = group_bytes(&model, "encoder.");
    let lm = group_bytes(&model, "lm.");
    assert!(!enc.is_empty());
    train(&mut model, &ex, &tc(4), false, |_, _, _| {}).unwrap();
    assert_eq!(group_bytes(&model, "encoder."), enc);
    assert_ne!(group_bytes(&model, "lm."), lm);
    assert!(model.params.iter().filter(|(n, _)| n.starts_with("encoder.")).all(|(_, p)| !p.trainable));
}

#[test]
fn unfrozen_encoder_does_train() {
    let samples = corpus(6);
    let mut model = tiny_model(&samples, false);
    let ex = prepare_examples(&model, &samples).unwrap();
    let enc = group_bytes(&model, "encoder.");
    train(&mut model, &ex, &tc(2), false, |_, _, _| {}).unwrap();
    assert_ne!(group_bytes(&model, "encoder."), enc);
}

#[test]
fn training_is_reproducible_and_parallel_agnostic() {
    let samples = corpus(6);
    let run = |parallel: bool| {
        let mut model = tiny_model(&samples, true);
        let ex = prepare_examples(&model, &samples).unwrap();
        let losses = train(&mut model, &ex, &tc(5), parallel, |_, _, _| {}).unwrap();
        (losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), checkpoint::params_bytes(&model))
    };
    let a = run(false);
    assert_eq!(a, run(false));
    assert_eq!(a, run(true));
}

#[test]
fn clipping_and_warmup_change_the_trajectory_only_when_enabled() {
    let samples = corpus(6);
    let run = |cfg: TrainConfig| {
        let mut model = tiny_model(&samples, true);
        let ex = prepare_examples(&model, &samples).unwrap();
        train(&mut model, &ex, &cfg, false, |_, _, _| {}).unwrap();
        checkpoint::params_bytes(&model)
    };
    let plain = run(tc(3));
    assert_eq!(plain, run(TrainConfig { clip_norm: 1e9, ..tc(3) }));
    assert_ne!(plain, run(TrainConfig { clip_norm: 1e-3, ..tc(3) }));
    assert_ne!(plain, run(TrainConfig { warmup_steps: 10, ..tc(3) }));
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let samples = corpus(4);
    let mut model = tiny_model(&samples, true);
    let ex = prepare_examples(&model, &samples).unwrap();
    train(&mut model, &ex, &tc(2), false, |_, _, _| {}).unwrap();
    let ck = dir.path().join("ck");
    let hash = checkpoint::save(&ck, &model, &serde_json::json!({"train": {"steps": 2}}), 2).unwrap();
    let (back, manifest) = checkpoint::load(&ck).unwrap();
    assert_eq!(manifest.params_hash, hash);
    assert_eq!(manifest.steps, 2);
    assert_eq!(checkpoint::params_bytes(&back), checkpoint::params_bytes(&model));
    for s in &samples {
        assert_eq!(back.answer(&s.views, &s.question).unwrap(), model.answer(&s.views, &s.question).unwrap());
    }
    let p = ck.join(checkpoint::PARAMS_FILE);
    let mut bytes = fs::read(&p).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&p, bytes).unwrap();
    let err = checkpoint::load(&ck).unwrap_err().to_string();
    assert!(err.contains("hash mismatch"), "{err}");
}

#[test]
fn eval_report_reproduces_from_predictions() {
    let samples = corpus(5);
    let model = tiny_model(&samples, true);
    let ex = prepare_examples(&model, &samples).unwrap();
    let (records, report) = eval::evaluate(&model, &ex, false).unwrap();
    let mut buf = Vec::new();
    write_predictions(&mut buf, &records).unwrap();
    let back = read_predictions(buf.as_slice()).unwrap();
    assert_eq!(back, records);
    let again = eval::score_records(&back).unwrap();
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&report).unwrap());
    let (par, _) = eval::evaluate(&model, &ex, true).unwrap();
    assert_eq!(par, records);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_write_is_byte_stable_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_split(11, Split::Test, 12, 16);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_dataset(&samples, &a).unwrap();
    write_dataset(&generate_split(11, Split::Test, 12, 16), &b).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(read_dataset(&a).unwrap(), samples);
}

#[test]
fn unknown_words_are_rejected_before_eval() {
    let samples = corpus(3);
    let model = tiny_model(&samples[..1], true);
    let mut odd = samples[0].clone();
    odd.question = "what is the zebra doing?".into();
    assert!(eval::check_vocab(&model, &[odd]).is_err());
    assert!(eval::check_vocab(&model, &samples[..1]).is_ok());
}
