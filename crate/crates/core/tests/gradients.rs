use mantis_core::data::{class_list, generate_dataset, DataSpec};
use mantis_core::model::{LossWeights, Model, ModelConfig, SaaSettings, Tuning};
use mantis_core::saa::{ControllerKind, FusionKind, OperatorMask};
use mantis_core::serialization::CurveKind;
use mantis_core::train::{grad_check, prepare_all};

fn tiny() -> ModelConfig {
    ModelConfig {
        d: 8,
        expand: 2,
        state: 4,
        conv_width: 4,
        blocks: 2,
        patches: 6,
        k: 4,
        d_o: 4,
        d_proj: 5,
        classes: 3,
        curves: [CurveKind::Hilbert, CurveKind::TransHilbert],
        bits: 10,
    }
}

fn check(controller: ControllerKind, fusion: FusionKind, modulate: OperatorMask) {
    let saa = SaaSettings { d_phi: 6, r: 3, controller, fusion, modulate };
    let (model, mut store) = Model::new(tiny(), Some(saa), Tuning::Mantis, 11).unwrap();
    // move away from the zero-initialized identity so every path is exercised
    for (i, a) in model.adapters.iter().enumerate() {
        for (j, v) in store.value_mut(a.u).iter_mut().enumerate() {
            *v = 0.3 * ((i * 31 + j * 7) as f64).sin();
        }
    }
    for (j, v) in store.value_mut(model.gamma).iter_mut().enumerate() {
        *v = 0.2 * (j as f64).cos();
    }
    let data = generate_dataset(&DataSpec {
        classes: class_list(3).unwrap(),
        points: 48,
        noise: 0.01,
        samples_per_class: 8,
        rotate: true,
        seed: 2,
    })
    .unwrap();
    let samples = prepare_all(&model, &store, &data.train[..2]).unwrap();
    // a sparse controller must have live coordinates or the adapter path is
    // not exercised
    let mut active = 0;
    for _ in 0..6 {
        let fwd = model.forward(&store, &samples[0], Default::default()).unwrap();
        active = fwd.control_signals().iter().map(|v| v.iter().filter(|x| **x != 0.0).count()).sum::<usize>();
        if active > 0 {
            break;
        }
        for a in &model.adapters {
            store.value_mut(a.w_drv).iter_mut().for_each(|v| *v *= 2.0);
        }
    }
    assert!(active > 0);
    let r = grad_check(&model, &store, &samples, &LossWeights::default(), 1e-5, 1e-4, 1e-6).unwrap();
    assert!(r.passed(), "{controller:?}/{fusion:?}: {:#?}", r);
    assert_eq!(r.excluded + r.checked, store.trainable_count());
}

#[test]
fn soft_concat_mlp_all_operators() {
    check(ControllerKind::Soft, FusionKind::ConcatMlp, OperatorMask::default());
}

#[test]
fn smooth_controllers_and_fusions() {
    for c in [ControllerKind::Sigmoid, ControllerKind::Tanh, ControllerKind::Dense] {
        check(c, FusionKind::ConcatMlp, OperatorMask::default());
    }
    for f in [FusionKind::Add, FusionKind::Concat, FusionKind::Gated, FusionKind::Xattn] {
        check(ControllerKind::Soft, f, OperatorMask::default());
    }
    check(ControllerKind::Soft, FusionKind::ConcatMlp, "B,C".parse().unwrap());
}
