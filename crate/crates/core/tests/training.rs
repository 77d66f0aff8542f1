use segdiff_core::network::{ModelConfig, SegDiffNet};
use segdiff_core::sampler::SamplerConfig;
use segdiff_core::schedule::{build_schedule, loss, ScheduleKind};
use segdiff_core::synthdata::{generate_split, CorpusSpec, SegSample, Split};
use segdiff_core::trainer::{evaluate, load_checkpoint, save_checkpoint, train, AdamW, TrainConfig};
use segdiff_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(size: usize, train: usize, val: usize) -> (Vec<SegSample>, Vec<SegSample>) {
    let spec = CorpusSpec {
        train_count: train,
        val_count: val,
        test_count: 0,
        image_size: size,
        seed: 11,
        ..CorpusSpec::default()
    };
    (
        generate_split(&spec, Split::Train).unwrap(),
        generate_split(&spec, Split::Val).unwrap(),
    )
}

fn toy(size: usize) -> ModelConfig {
    ModelConfig {
        image_size: size,
        ..ModelConfig::s_toy()
    }
}

fn config(size: usize, steps: usize, batch: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        batch_size: batch,
        learning_rate: lr,
        seed: 5,
        model: toy(size),
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_four_images() {
    let (train_set, _) = corpus(32, 4, 0);
    let out = train(&config(32, 500, 4, 1e-3), &train_set, &[], None).unwrap();
    let losses = out.losses();
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(tail <= 0.2 * head, "loss went from {head:.4} to {tail:.4}");
}

#[test]
fn initial_loss_is_near_unit_noise_variance() {
    let (train_set, _) = corpus(32, 16, 0);
    let out = train(&config(32, 10, 16, 1e-12), &train_set, &[], None).unwrap();
    let mean = out.losses().iter().sum::<f64>() / 10.0;
    assert!((mean - 1.0).abs() <= 0.2, "initial loss {mean}");
}

#[test]
fn seeded_runs_are_identical() {
    let (train_set, _) = corpus(32, 6, 0);
    let cfg = TrainConfig {
        augment: true,
        ..config(32, 12, 4, 1e-3)
    };
    let a = train(&cfg, &train_set, &[], None).unwrap();
    let b = train(&cfg, &train_set, &[], None).unwrap();
    assert_eq!(a.losses(), b.losses());
    for (x, y) in a.model.params().entries().iter().zip(b.model.params().entries()) {
        assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
    }
    let c = train(&TrainConfig { seed: 6, ..cfg }, &train_set, &[], None).unwrap();
    assert_ne!(a.losses(), c.losses());
}

#[test]
fn every_parameter_receives_gradient_early() {
    let model_cfg = ModelConfig::default();
    let size = model_cfg.image_size;
    let (train_set, _) = corpus(size, 2, 0);
    let schedule = build_schedule(model_cfg.diffusion_steps, ScheduleKind::Linear).unwrap();
    let mut model = SegDiffNet::<f32>::new(model_cfg, 0).unwrap();
    let n = model.params().len();
    let mut opt = AdamW::new(model.params(), 1e-4);
    let mut reached = vec![false; n];
    let mut nonzero = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = Tensor::from_vec(
        &[2, 1, size, size],
        train_set.iter().flat_map(|s| s.image.data().to_vec()).collect(),
    )
    .unwrap();
    let x0 = Tensor::from_vec(
        &[2, 1, size, size],
        train_set.iter().flat_map(|s| s.mask.to_signed::<f32>()).collect(),
    )
    .unwrap();
    for _ in 0..50 {
        let t: Vec<usize> = (0..2).map(|_| rng.random_range(0..1000)).collect();
        let noise = Tensor::randn(x0.shape(), &mut rng);
        let g = Graph::new();
        let l = loss(&g, &schedule, &model, &x0, &images, &t, &noise).unwrap();
        let grads = g.backward(l).unwrap();
        let grads: Vec<_> = (0..n)
            .map(|i| g.param_var(i).and_then(|v| grads.get(v).cloned()))
            .collect();
        for (i, gr) in grads.iter().enumerate() {
            if let Some(gr) = gr {
                reached[i] = true;
                nonzero[i] |= gr.data().iter().any(|&v| v != 0.0);
            }
        }
        opt.step(model.params_mut(), &grads, 1e-3).unwrap();
        if nonzero.iter().all(|&z| z) {
            break;
        }
    }
    for (i, e) in model.params().entries().iter().enumerate() {
        assert!(reached[i], "{} never joined the graph", e.name);
        if !e.name.ends_with(".im") {
            assert!(nonzero[i], "{} never received a nonzero gradient", e.name);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_validation_dice() {
    let (train_set, val_set) = corpus(32, 4, 3);
    let cfg = config(32, 8, 4, 1e-3);
    let out = train(&cfg, &train_set, &val_set, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tar");
    let manifest = save_checkpoint(&path, &out.model, 8, Some(&cfg), cfg.schedule).unwrap();
    let (loaded, read) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(manifest, read);
    assert_eq!(read.train.as_ref(), Some(&cfg));
    let schedule = cfg.build_schedule().unwrap();
    let sampler = SamplerConfig {
        steps: 10,
        ensemble_size: 2,
        ..SamplerConfig::default()
    };
    let before = evaluate(&out.model, &schedule, &val_set, &sampler).unwrap();
    let after = evaluate(&loaded, &schedule, &val_set, &sampler).unwrap();
    assert_eq!(before.report.mean_dice, after.report.mean_dice);
    assert_eq!(before.report, after.report);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tar");
    let model = SegDiffNet::<f32>::new(toy(32), 1).unwrap();
    save_checkpoint(&path, &model, 0, None, ScheduleKind::Linear).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    // Flip a byte inside the tensor blob, well past both tar headers.
    bytes[n - 2048] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
    assert!(err.contains("hash"), "{err}");
}

#[test]
fn writes_logs_and_checkpoints() {
    let (train_set, val_set) = corpus(32, 4, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        eval_every: 2,
        validation: SamplerConfig {
            steps: 5,
            ensemble_size: 1,
            ..SamplerConfig::default()
        },
        ..config(32, 4, 2, 1e-3)
    };
    let out = train(&cfg, &train_set, &val_set, Some(dir.path())).unwrap();
    for f in ["loss.csv", "loss.png", "validation.csv", "final.tar", "checkpoint_000002.tar"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,loss,lr,wall_time");
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(out.validation.iter().map(|v| v.0).collect::<Vec<_>>(), vec![2, 4]);
}

#[test]
fn rejects_invalid_configs() {
    let (train_set, _) = corpus(32, 2, 0);
    for cfg in [
        TrainConfig { batch_size: 0, ..config(32, 1, 1, 1e-3) },
        TrainConfig { learning_rate: 0.0, ..config(32, 1, 1, 1e-3) },
        TrainConfig { ema_decay: Some(1.0), ..config(32, 1, 1, 1e-3) },
    ] {
        assert!(train(&cfg, &train_set, &[], None).is_err());
    }
    assert!(train(&config(32, 1, 1, 1e-3), &[], &[], None).is_err());
}
