use proptest::prelude::*;

use super::*;
use crate::numerics::{SeededRng, Tensor};
use crate::optim::{Adam, OptimizerConfig};
use crate::transformer::{AcousticInput, BackboneConfig, VectorFieldModel};

const P: PathParams = PathParams { sigma_min: 1e-5 };

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut SeededRng::new(seed))
}

#[test]
fn path_endpoints_are_exact() {
    let x0 = rand(&[3, 2], 1);
    let x1 = rand(&[3, 2], 2);
    assert!(conditional_path(&x0, &x1, 0.0, P).unwrap().bit_eq(&x0));
    let end = conditional_path(&x0, &x1, 1.0, P).unwrap();
    let want = x0.zip_map(&x1, "t", |a, b| 1e-5 * a + b).unwrap();
    assert!(end.bit_eq(&want));
}

#[test]
fn path_plug_in_value() {
    let x0 = Tensor::vector(vec![0.0]);
    let x1 = Tensor::vector(vec![2.0]);
    assert_eq!(conditional_path(&x0, &x1, 0.5, P).unwrap().data(), &[1.0]);
}

#[test]
fn target_examples() {
    let x1 = rand(&[2, 2], 3);
    assert_eq!(target_field(&Tensor::zeros(&[2, 2]), &x1, P).unwrap(), x1);
    let c = Tensor::full(&[1, 2], 3.0);
    let t = target_field(&c, &c, P).unwrap();
    for v in t.data() {
        assert!((v - 3e-5).abs() < 1e-15);
    }
}

#[test]
fn shape_mismatch_rejected() {
    let a = Tensor::zeros(&[2, 2]);
    let b = Tensor::zeros(&[3, 2]);
    assert!(conditional_path(&a, &b, 0.5, P).is_err());
    assert!(target_field(&a, &b, P).is_err());
    assert!(PathParams::new(0.0).is_err());
    assert!(PathParams::new(1.0).is_err());
}

proptest! {
    #[test]
    fn path_and_target_identity(seed in 0u64..10_000, t in 0.0f64..=1.0) {
        let x0 = rand(&[4, 3], seed);
        let x1 = rand(&[4, 3], seed + 1);
        let psi = conditional_path(&x0, &x1, t, P).unwrap();
        let u = target_field(&x0, &x1, P).unwrap();
        for i in 0..psi.len() {
            let lhs = psi.data()[i] + (1.0 - t) * u.data()[i];
            // the σ terms cancel to σ·x0 for every t
            let rhs = x1.data()[i] + 1e-5 * x0.data()[i];
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

#[test]
fn mask_modes() {
    let x1 = rand(&[8, 3], 4);
    let (m, mask) = apply_mask(&x1, &MaskSpec::all());
    assert!(mask.iter().all(|&b| b));
    for f in 0..8 {
        assert_eq!(m.row(f), &[0.0, 0.0, 0.0, 1.0]);
    }
    let (m, mask) = apply_mask(&x1, &MaskSpec::none());
    assert!(mask.iter().all(|&b| !b));
    for f in 0..8 {
        assert_eq!(&m.row(f)[..3], x1.row(f));
        assert_eq!(m.row(f)[3], 0.0);
    }
    let (_, mask) = apply_mask(&x1, &MaskSpec::span(0.25, 0.5).unwrap());
    let idx: Vec<usize> = (0..8).filter(|&i| mask[i]).collect();
    assert_eq!(idx, vec![2, 3, 4, 5]);
    assert!(MaskSpec::span(0.6, 0.6).is_err());
}

#[test]
fn full_mask_hides_target() {
    let a = rand(&[6, 4], 5);
    let b = rand(&[6, 4], 6);
    let (ma, _) = apply_mask(&a, &MaskSpec::all());
    let (mb, _) = apply_mask(&b, &MaskSpec::all());
    assert!(ma.bit_eq(&mb));
}

#[test]
fn sampled_masks_are_valid() {
    let mut rng = SeededRng::new(9);
    for _ in 0..200 {
        let m = MaskSpec::sample(&mut rng);
        m.validate().unwrap();
        if m.mode == MaskMode::Span {
            assert!(m.length >= 0.7);
        }
    }
}

fn zero_head(mut model: VectorFieldModel) -> VectorFieldModel {
    for n in ["out_proj.w", "out_proj.b"] {
        model.store.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    model
}

fn one_dim_config() -> BackboneConfig {
    BackboneConfig {
        feature_dim: 1,
        ..BackboneConfig::desk()
    }
}

#[test]
fn loss_is_one_for_unit_target_and_zero_field() {
    let model = zero_head(VectorFieldModel::new(one_dim_config(), 1).unwrap());
    let ex = TrainingExample {
        x1: Tensor::ones(&[1, 1]),
        symbols: vec![0],
        condition: vec![],
        mask: MaskSpec::all(),
    };
    let l = cfm_loss_value(&model, &ex, 0.3, &Tensor::zeros(&[1, 1]), P, LossMaskPolicy::Infilling).unwrap();
    assert_eq!(l, 1.0);
}

#[test]
fn loss_is_zero_when_prediction_equals_target() {
    let model = zero_head(VectorFieldModel::new(BackboneConfig::desk(), 2).unwrap());
    let x0 = rand(&[5, 8], 7);
    // target x1 − (1 − σ)x0 vanishes
    let x1 = x0.scale(1.0 - 1e-5);
    let ex = TrainingExample {
        x1,
        symbols: vec![1, 2, 3, 4, 5],
        condition: vec![],
        mask: MaskSpec::span(0.2, 0.6).unwrap(),
    };
    let l = cfm_loss_value(&model, &ex, 0.8, &x0, P, LossMaskPolicy::Infilling).unwrap();
    assert!(l.abs() < 1e-20);
    let other = TrainingExample {
        x1: rand(&[5, 8], 8),
        ..ex
    };
    assert!(cfm_loss_value(&model, &other, 0.8, &x0, P, LossMaskPolicy::Infilling).unwrap() > 0.0);
}

#[test]
fn loss_matches_plain_loop() {
    let cfg = BackboneConfig {
        feature_dim: 2,
        ..BackboneConfig::desk()
    };
    let model = VectorFieldModel::new(cfg, 3).unwrap();
    for (case, spec) in [MaskSpec::all(), MaskSpec::none(), MaskSpec::span(0.5, 0.5).unwrap()]
        .into_iter()
        .enumerate()
    {
        let x0 = rand(&[2, 2], 10 + case as u64);
        let x1 = rand(&[2, 2], 20 + case as u64);
        let t = 0.37;
        let ex = TrainingExample {
            x1: x1.clone(),
            symbols: vec![3, 1],
            condition: vec![],
            mask: spec,
        };
        let got = cfm_loss_value(&model, &ex, t, &x0, P, LossMaskPolicy::Infilling).unwrap();

        let s = 1e-5;
        let mut masked = Tensor::zeros(&[2, 3]);
        let mut psi = Tensor::zeros(&[2, 2]);
        let hidden: Vec<bool> = match spec.mode {
            MaskMode::All => vec![true, true],
            MaskMode::None => vec![false, false],
            MaskMode::Span => vec![false, true],
        };
        for f in 0..2 {
            for c in 0..2 {
                psi.set(f, c, (1.0 - (1.0 - s) * t) * x0.get(f, c) + t * x1.get(f, c));
                if !hidden[f] {
                    masked.set(f, c, x1.get(f, c));
                }
            }
            masked.set(f, 2, if hidden[f] { 1.0 } else { 0.0 });
        }
        let pred = model
            .predict(
                &AcousticInput {
                    t,
                    symbols: &[3, 1],
                    masked: &masked,
                    state: &psi,
                },
                None,
            )
            .unwrap();
        let used: Vec<usize> = match spec.mode {
            MaskMode::Span => vec![1],
            _ => vec![0, 1],
        };
        let mut acc = 0.0;
        for &f in &used {
            for c in 0..2 {
                let target = x1.get(f, c) - (1.0 - s) * x0.get(f, c);
                acc += (pred.get(f, c) - target).powi(2);
            }
        }
        let want = acc / (used.len() * 2) as f64;
        assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
    }
}

fn toy_batch(n: usize, seed: u64) -> Vec<TrainingExample> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| {
            let frames = rng.int_inclusive(4, 10);
            TrainingExample {
                x1: Tensor::randn(&[frames, 8], 1.0, &mut rng),
                symbols: (0..frames).map(|_| rng.below(16)).collect(),
                condition: vec![],
                mask: MaskSpec::sample(&mut rng),
            }
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut model = VectorFieldModel::new(BackboneConfig::desk(), 4).unwrap();
    let before = model.store.clone();
    let mut opt = Adam::new(OptimizerConfig {
        lr: 0.0,
        ..OptimizerConfig::default()
    });
    let mut rng = SeededRng::new(1);
    pretrain_step(
        &mut model,
        &toy_batch(3, 2),
        &mut opt,
        &mut rng,
        P,
        LossMaskPolicy::Infilling,
    )
    .unwrap();
    for (name, t) in before.iter() {
        assert!(model.store.get(name).unwrap().bit_eq(t), "{name}");
    }
}

#[test]
fn training_is_deterministic() {
    let trace = || {
        let mut model = VectorFieldModel::new(BackboneConfig::desk(), 5).unwrap();
        let mut opt = Adam::new(OptimizerConfig {
            warmup_steps: 2,
            ..OptimizerConfig::default()
        });
        let mut rng = SeededRng::new(3);
        let batch = toy_batch(2, 4);
        (0..4)
            .map(|_| pretrain_step(&mut model, &batch, &mut opt, &mut rng, P, LossMaskPolicy::Infilling).unwrap())
            .collect::<Vec<f64>>()
    };
    let (a, b) = (trace(), trace());
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn non_finite_loss_aborts_step() {
    let mut model = VectorFieldModel::new(BackboneConfig::desk(), 6).unwrap();
    model.store.get_mut("out_proj.b").unwrap().data_mut()[0] = f64::NAN;
    let before = model.store.get("in_proj.w").unwrap().clone();
    let mut opt = Adam::new(OptimizerConfig::default());
    let err = pretrain_step(
        &mut model,
        &toy_batch(1, 1),
        &mut opt,
        &mut SeededRng::new(0),
        P,
        LossMaskPolicy::Infilling,
    )
    .unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite { .. }));
    assert!(model.store.get("in_proj.w").unwrap().bit_eq(&before));
}

#[test]
fn telemetry_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut log = TelemetryLog::open(&path).unwrap();
    let r = TelemetryRecord {
        step: 3,
        loss: 0.25,
        wall_time_s: 1.5,
        trainable_params: 42,
    };
    log.append(&r).unwrap();
    log.append(&r).unwrap();
    assert_eq!(TelemetryLog::read(&path).unwrap(), vec![r.clone(), r]);
}
