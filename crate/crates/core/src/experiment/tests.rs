use std::path::Path;

use super::*;
use crate::adapters::{inject_adapters, AdapterSpec, ConditionEncoder, ParameterPartition};
use crate::duration::{DurationConfig, DurationModel};
use crate::tasks::{word_vocab, TaskKind};
use crate::transformer::{BackboneConfig, VectorFieldModel};
use crate::Error;

#[test]
fn config_toml_round_trip() {
    let mut c = RunConfig::desk(TaskKind::Pause);
    c.adapter = Some(AdapterSpec::desk());
    let text = c.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = RunConfig::desk(TaskKind::Pause).to_toml().unwrap();
    let typo = text.replace("pretrain_steps", "pretrain_stepz");
    assert!(matches!(RunConfig::from_toml(&typo).unwrap_err(), Error::Config(_)));
    let extra = format!("{text}\n[extra]\nx = 1\n");
    assert!(RunConfig::from_toml(&extra).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = RunConfig::desk(TaskKind::Emphasis);
    c.task.feature_dim = 4;
    assert!(c.validate().is_err());
    let mut c = RunConfig::desk(TaskKind::Emphasis);
    c.schedule.data_fraction = 0.0;
    assert!(c.validate().is_err());
    let mut c = RunConfig::desk(TaskKind::Emphasis);
    c.task.n_symbols = 40;
    assert!(c.validate().is_err());
}

#[test]
fn fingerprint_tracks_shape_sections_only() {
    let a = RunConfig::desk(TaskKind::Emphasis);
    let mut b = a.clone();
    b.schedule.finetune_steps += 1;
    b.adapter = Some(AdapterSpec::desk());
    b.task.task = TaskKind::Pause;
    b.task.annotation_rate = 0.3;
    assert_eq!(a.fingerprint(), b.fingerprint());
    let mut c = a.clone();
    c.backbone.n_layers = 3;
    assert_ne!(a.fingerprint(), c.fingerprint());
    let mut d = a.clone();
    d.task.noise_std = 0.1;
    assert_ne!(a.fingerprint(), d.fingerprint());
    assert_eq!(a.fingerprint().len(), 64);
}

fn injected_model() -> (VectorFieldModel, ParameterPartition) {
    let mut m = VectorFieldModel::new(BackboneConfig::desk(), 3).unwrap();
    let spec = AdapterSpec::desk();
    let (enc, store) = ConditionEncoder::build(spec.encoder, word_vocab(12), 3).unwrap();
    let p = inject_adapters(&mut m, &spec, enc, store, 3).unwrap();
    (m, p)
}

fn assert_same_store(a: &crate::transformer::ParamStore, b: &crate::transformer::ParamStore) {
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        assert!(ta.bit_eq(tb), "{na}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (m, p) = injected_model();
    let ck = Checkpoint::acoustic(&m, p.clone(), "abc", 17);
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 17);
    assert_eq!(back.fingerprint, "abc");
    assert_eq!(back.partition, p);
    assert!(back.has_adapters());
    assert_same_store(&back.params, &m.store);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    let model = back.into_acoustic().unwrap();
    assert_eq!(model.stack, m.stack);
    assert_eq!(model.conditioning, m.conditioning);

    let d = DurationModel::new(DurationConfig::desk(), 2).unwrap();
    let dck = Checkpoint::duration(&d, ParameterPartition::all_trainable(&d.store), "abc", 0);
    let back = Checkpoint::from_bytes(&dck.to_bytes().unwrap(), Path::new("mem")).unwrap();
    assert!(!back.has_adapters());
    assert!(back.clone().into_acoustic().is_err());
    assert_same_store(&back.into_duration().unwrap().store, &d.store);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (m, p) = injected_model();
    let bytes = Checkpoint::acoustic(&m, p, "f", 0).to_bytes().unwrap();
    let origin = Path::new("x");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad, origin).unwrap_err(),
        Error::Format { .. }
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(Checkpoint::from_bytes(&bad, origin).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], origin).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long, origin).is_err());
}

#[test]
fn fingerprint_mismatch_needs_override() {
    let dir = tempfile::tempdir().unwrap();
    let (m, p) = injected_model();
    let path = dir.path().join("a.ckpt");
    Checkpoint::acoustic(&m, p, "one", 0).save(&path).unwrap();
    assert!(Checkpoint::load_checked(&path, "one", false).is_ok());
    assert!(matches!(
        Checkpoint::load_checked(&path, "two", false).unwrap_err(),
        Error::FingerprintMismatch { .. }
    ));
    assert!(Checkpoint::load_checked(&path, "two", true).is_ok());
}

#[test]
fn data_fraction_counts() {
    assert_eq!(fraction_count(340, 0.25), 85);
    assert_eq!(fraction_count(10, 0.25), 3);
    assert_eq!(fraction_count(10, 1.0), 10);
    assert_eq!(fraction_count(3, 0.01), 1);
}

#[test]
fn sweep_axes_edit_the_config() {
    let mut c = RunConfig::desk(TaskKind::Emphasis);
    assert!(apply_axis(&c, SweepAxis::LoraRank, 2.0).is_err());
    c.adapter = Some(AdapterSpec::desk());
    let r = apply_axis(&c, SweepAxis::LoraRank, 2.0).unwrap();
    assert_eq!(r.adapter.as_ref().unwrap().lora.rank, 2);
    assert!(apply_axis(&c, SweepAxis::LoraRank, 2.5).is_err());
    let x = apply_axis(&c, SweepAxis::CrossAttnDim, 32.0).unwrap();
    assert_eq!(x.adapter.as_ref().unwrap().cross_attn_inner(), 32);
    assert!(apply_axis(&c, SweepAxis::CrossAttnDim, 30.0).is_err());
    let f = apply_axis(&c, SweepAxis::DataFraction, 0.25).unwrap();
    assert_eq!(f.schedule.data_fraction, 0.25);
    assert!(apply_axis(&c, SweepAxis::DataFraction, 1.5).is_err());
}

#[test]
fn schedule_ratios() {
    let s = Schedule {
        finetune_steps: 100,
        ..Schedule::default()
    };
    assert_eq!(s.acoustic_finetune_steps(TaskKind::Pause), 100);
    assert_eq!(s.acoustic_finetune_steps(TaskKind::Emphasis), 60);
    assert_eq!(s.duration_finetune_steps(TaskKind::Burst), 200);
    assert_eq!(s.duration_finetune_steps(TaskKind::Emphasis), 120);
}

#[test]
fn request_records_parse_with_defaults() {
    let r: RequestRecord = serde_json::from_str(r#"{"id":"a","symbols":[1,2],"seed":4}"#).unwrap();
    assert_eq!(r.z_f, "");
    assert!(r.durations.is_none() && r.prompt.is_none());
    assert!(serde_json::from_str::<RequestRecord>(r#"{"id":"a","symbols":[],"seed":1,"zf":"x"}"#).is_err());
}
