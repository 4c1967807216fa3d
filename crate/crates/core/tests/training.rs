use sentinel::checkpoint;
use sentinel::config::prepare_table;
use sentinel::data::{load_csv, DatasetKind, LoadOptions, Split, WindowedData};
use sentinel::layers::{ForwardCtx, Linear};
use sentinel::optim::{AdamW, AdamWConfig};
use sentinel::synthetic;
use sentinel::tensor::no_grad;
use sentinel::training::{self, evaluate, evaluate_windows, evaluate_windows_seq, TrainConfig, Trainer};
use sentinel::{Error, ModelConfig, Rng, SentinelModel, Tensor};

fn sinusoid_data(rows: usize) -> WindowedData {
    let table = synthetic::sinusoid(rows);
    let prepared = prepare_table(&table, DatasetKind::Custom { train: 0.7, val: 0.1 }).unwrap();
    prepared.windows(32, 8)
}

fn small_model() -> ModelConfig {
    ModelConfig {
        lookback: 32,
        horizon: 8,
        channels: 2,
        d_model: 16,
        patch_len: 8,
        stride: 4,
        dropout: 0.1,
        ..ModelConfig::default()
    }
}

fn scalar_linear(w: f64) -> Linear {
    let mut lin = Linear::new(1, 1, false, &mut Rng::new(0));
    lin.weight = Tensor::param(&[1, 1], vec![w]).unwrap();
    lin
}

#[test]
fn adamw_matches_scalar_oracle() {
    let cfg = AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let grads = [0.5, -1.0, 0.25, 3.0];
    let mut lin = scalar_linear(2.0);
    let mut opt = AdamW::new(cfg);

    let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
    for (i, g) in grads.iter().enumerate() {
        lin.weight.set_grad(Some(vec![*g]));
        opt.step(&mut lin).unwrap();

        let t = (i + 1) as i32;
        w *= 1.0 - cfg.lr * cfg.weight_decay;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);

        assert!((lin.weight.item() - w).abs() < 1e-14, "step {t}: {} vs {w}", lin.weight.item());
    }
    assert_eq!(opt.steps(), grads.len() as u64);
}

#[test]
fn first_step_moves_each_weight_by_lr() {
    for g in [1e-3, -0.7, 40.0] {
        let mut lin = scalar_linear(1.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        lin.weight.set_grad(Some(vec![g]));
        opt.step(&mut lin).unwrap();
        let moved = 1.0 - lin.weight.item();
        assert!((moved - 5e-4 * g.signum()).abs() < 1e-8, "g={g}: moved {moved}");
    }
}

#[test]
fn non_finite_gradient_leaves_parameters_untouched() {
    let mut lin = scalar_linear(1.5);
    let mut opt = AdamW::new(AdamWConfig::default());
    lin.weight.set_grad(Some(vec![f64::NAN]));
    assert!(matches!(opt.step(&mut lin), Err(Error::Numeric(_))));
    assert_eq!(lin.weight.item(), 1.5);
    assert_eq!(opt.steps(), 0);
}

#[test]
fn nan_targets_raise_numeric_error() {
    let data = sinusoid_data(200);
    let ws = data.windows(Split::Train).unwrap();
    let (x, y) = data.batch(&ws[..4]).unwrap();
    let y = Tensor::new(y.shape(), vec![f64::NAN; y.numel()]).unwrap();
    let mut trainer = Trainer::new(SentinelModel::new(small_model(), 0).unwrap(), &TrainConfig::default(), 0);
    let err = trainer.step(&x, &y).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn returns_best_validation_model() {
    let data = sinusoid_data(400);
    let cfg = TrainConfig {
        epochs: 5,
        patience: 100,
        lr: 3e-3,
        max_batches_per_epoch: Some(4),
        ..TrainConfig::default()
    };
    let out = training::train(&small_model(), &data, &cfg, 3, None).unwrap();
    assert_eq!(out.history.len(), 5);
    let (argmin, min) = out
        .history
        .iter()
        .map(|r| (r.epoch, r.val_mse))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    assert_eq!(out.best_epoch, argmin);
    assert_eq!(out.best_val_mse, min);
    let (val_mse, _) = evaluate(&out.model, &data, Split::Val, 64).unwrap();
    assert_eq!(val_mse.to_bits(), min.to_bits());
    assert_eq!(out.steps, 20);
}

#[test]
fn patience_bounds_the_epoch_count() {
    let data = sinusoid_data(400);
    let base = TrainConfig {
        epochs: 6,
        max_batches_per_epoch: Some(2),
        ..TrainConfig::default()
    };
    let zero = training::train(&small_model(), &data, &TrainConfig { patience: 0, ..base.clone() }, 0, None).unwrap();
    assert_eq!(zero.history.len(), 1);

    let one = training::train(&small_model(), &data, &TrainConfig { patience: 1, ..base }, 0, None).unwrap();
    let n = one.history.len();
    assert!(n == 6 || n == one.best_epoch + 1, "ran {n} epochs, best {}", one.best_epoch);
}

#[test]
fn one_epoch_improves_validation_for_most_seeds() {
    let data = sinusoid_data(400);
    let cfg = TrainConfig {
        epochs: 1,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut improved = 0;
    for seed in 0..3 {
        let untrained = SentinelModel::new(small_model(), seed).unwrap();
        let (before, _) = evaluate(&untrained, &data, Split::Val, 64).unwrap();
        let out = training::train(&small_model(), &data, &cfg, seed, None).unwrap();
        if out.best_val_mse < before {
            improved += 1;
        }
    }
    assert!(improved >= 2, "only {improved}/3 seeds improved");
}

#[test]
fn parallel_and_sequential_evaluation_agree_bitwise() {
    let data = sinusoid_data(400);
    let model = SentinelModel::new(small_model(), 1).unwrap();
    let ws = data.windows(Split::Test).unwrap();
    for batch in [1, 7, 64] {
        let a = evaluate_windows(&model, &data, &ws, batch).unwrap();
        let b = evaluate_windows_seq(&model, &data, &ws, batch).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions_and_bytes() {
    let data = sinusoid_data(200);
    let cfg = TrainConfig {
        epochs: 1,
        max_batches_per_epoch: Some(2),
        ..TrainConfig::default()
    };
    let out = training::train(&small_model(), &data, &cfg, 5, None).unwrap();
    let bytes = checkpoint::to_bytes(&out.model).unwrap();
    assert_eq!(bytes, checkpoint::to_bytes(&out.model).unwrap());
    let restored = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint::to_bytes(&restored).unwrap(), bytes);

    let ws = data.windows(Split::Test).unwrap();
    let (x, _) = data.batch(&ws).unwrap();
    let (a, b) = no_grad(|| {
        (
            out.model.forward(&x, &mut ForwardCtx::eval()).unwrap(),
            restored.forward(&x, &mut ForwardCtx::eval()).unwrap(),
        )
    });
    assert_eq!(a.data(), b.data());
}

#[test]
fn fixture_matches_generator() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/sinusoid_2ch.csv");
    let loaded = load_csv(&path, &LoadOptions::default()).unwrap();
    let generated = synthetic::sinusoid(synthetic::SINUSOID_ROWS);
    assert_eq!(loaded.rows(), synthetic::SINUSOID_ROWS);
    assert_eq!(loaded.channel_names, generated.channel_names);
    for (a, b) in loaded.values.iter().zip(&generated.values) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
