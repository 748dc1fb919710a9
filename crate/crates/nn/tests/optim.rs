use metadt_nn::{adam_step, AdamConfig, Gradients, NnError, ParameterStore, Tensor};

fn store() -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    s.add("w", Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap())
        .unwrap();
    s.add("b", Tensor::from_f64(&[2], &[0.25, -0.75]).unwrap()).unwrap();
    s
}

#[test]
fn warmup_is_linear_then_flat() {
    let cfg = AdamConfig::default();
    assert_eq!(cfg.lr_at(5000), 0.5 * cfg.lr);
    assert_eq!(cfg.lr_at(10_000), cfg.lr);
    assert_eq!(cfg.lr_at(50_000), cfg.lr);
}

#[test]
fn zero_gradients_only_apply_weight_decay() {
    let mut s = store();
    let before = s.clone();
    let cfg = AdamConfig {
        warmup_steps: 0,
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let g = Gradients::zeros_like(&s);
    adam_step(&mut s, &g, &cfg).unwrap();
    for id in s.ids() {
        for (a, b) in s.get(id).data().iter().zip(before.get(id).data()) {
            assert!((a - b * (1.0 - 1e-2 * 1e-4)).abs() < 1e-15);
        }
    }
}

#[test]
fn gradients_are_clipped_to_global_norm() {
    let mut s = store();
    let mut g = Gradients::zeros_like(&s);
    // ‖g‖ = 1 spread over both tensors.
    g.get_mut(s.id("w").unwrap()).unwrap().data_mut()[0] = 0.6;
    g.get_mut(s.id("b").unwrap()).unwrap().data_mut()[1] = 0.8;
    let report = adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
    assert!((report.grad_norm - 1.0).abs() < 1e-12);
    assert!((report.clip_scale - 0.25).abs() < 1e-12);
    let (m, _) = s.moments(s.id("w").unwrap());
    // First moment after one step holds (1 − β1) · clipped gradient.
    assert!((m.data()[0] - 0.1 * 0.6 * 0.25).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut s = store();
    let before = s.clone();
    let mut g = Gradients::zeros_like(&s);
    g.get_mut(s.id("w").unwrap()).unwrap().data_mut()[3] = 0.1;
    let cfg = AdamConfig {
        lr: 0.0,
        ..AdamConfig::default()
    };
    adam_step(&mut s, &g, &cfg).unwrap();
    assert_eq!(s.step(), 1);
    for id in s.ids() {
        assert_eq!(s.get(id), before.get(id));
    }
}

#[test]
fn nan_gradient_is_rejected_before_any_update() {
    let mut s = store();
    let before = s.clone();
    let mut g = Gradients::zeros_like(&s);
    g.get_mut(s.id("b").unwrap()).unwrap().data_mut()[0] = f64::NAN;
    let err = adam_step(&mut s, &g, &AdamConfig::default()).unwrap_err();
    assert!(matches!(err, NnError::NonFiniteGradient(name) if name == "b"));
    assert_eq!(s.step(), 0);
    assert_eq!(s.get(s.id("w").unwrap()), before.get(before.id("w").unwrap()));
}

#[test]
fn adam_descends_a_quadratic() {
    let mut s = ParameterStore::<f64>::new();
    let id = s.add("x", Tensor::scalar(2.0)).unwrap();
    let cfg = AdamConfig {
        lr: 0.05,
        warmup_steps: 0,
        grad_clip: 0.0,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    for _ in 0..500 {
        let x = s.get(id).item();
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id).unwrap().data_mut()[0] = 2.0 * (x - 0.5);
        adam_step(&mut s, &g, &cfg).unwrap();
    }
    assert!((s.get(id).item() - 0.5).abs() < 1e-2);
}
