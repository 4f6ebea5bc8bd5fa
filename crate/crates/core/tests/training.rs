use ardiff::checks::angle_residuals;
use ardiff::denoiser::DenoiserConfig;
use ardiff::training::{make_synthetic_dataset, train, train_with_observer, Optimizer, SyntheticDatasetSpec, TrainConfig};
use ardiff::NoiseSchedule;

fn setup(steps: usize) -> (TrainConfig, Vec<ardiff::LatentVideo>, DenoiserConfig, NoiseSchedule) {
    let data = make_synthetic_dataset(&SyntheticDatasetSpec {
        n_sequences: 32,
        frames: 4,
        ..Default::default()
    })
    .unwrap();
    let mut dcfg = DenoiserConfig::new(4, 1, 2, 50);
    dcfg.d_model = 16;
    dcfg.mlp_hidden = 32;
    let cfg = TrainConfig {
        steps,
        batch_size: 8,
        learning_rate: 1e-3,
        ..Default::default()
    };
    (cfg, data, dcfg, NoiseSchedule::default_linear(50).unwrap())
}

#[test]
fn angle_differences_match_omega() {
    let spec = SyntheticDatasetSpec {
        n_sequences: 1000,
        ..Default::default()
    };
    let r = angle_residuals(&spec).unwrap();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "mean {mean} sd {sd}");
    // telescoped noise: std 0.01 * sqrt(F - 1) / (F - 1) per sequence mean
    let predicted = 0.01 / 7f64.sqrt();
    assert!((sd / predicted - 1.0).abs() < 0.15, "sd {sd} vs {predicted}");
}

#[test]
fn ema_is_exact_weighted_average() {
    let (cfg, data, dcfg, sched) = setup(10);
    let mut params = Vec::new();
    let mut emas = Vec::new();
    let out = train_with_observer(&cfg, &data, &dcfg, &sched, |tr| {
        params.push(tr.params.clone());
        emas.push(tr.ema.clone());
    })
    .unwrap();
    let d = cfg.ema_decay;
    let mut ema = out.initial.clone();
    for (p, got) in params.iter().zip(&emas) {
        ema.scale(d);
        ema.add_scaled(p, 1.0 - d);
        for (a, b) in ema.iter_scalars().zip(got.iter_scalars()) {
            assert!((a - b).abs() < 1e-13);
        }
    }
    assert_eq!(&out.ema, emas.last().unwrap());
}

#[test]
fn identical_seeds_identical_logs() {
    for optimizer in [Optimizer::Adam, Optimizer::Sgd] {
        let (mut cfg, data, dcfg, sched) = setup(30);
        cfg.optimizer = optimizer;
        let a = train(&cfg, &data, &dcfg, &sched).unwrap();
        let b = train(&cfg, &data, &dcfg, &sched).unwrap();
        let bits = |o: &ardiff::training::TrainOutput| o.log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.params, b.params);
        cfg.seed = 1;
        assert_ne!(bits(&a), bits(&train(&cfg, &data, &dcfg, &sched).unwrap()));
    }
}

#[test]
fn training_reduces_loss() {
    let (mut cfg, data, dcfg, sched) = setup(300);
    cfg.learning_rate = 3e-3;
    let out = train(&cfg, &data, &dcfg, &sched).unwrap();
    assert!(out.tail_mean(30) < 0.5 * out.head_mean(30), "{} vs {}", out.tail_mean(30), out.head_mean(30));
}

#[test]
fn every_step_is_clipped_and_valid() {
    let (mut cfg, data, dcfg, sched) = setup(40);
    cfg.grad_clip_norm = 0.05;
    let mut clipped = 0;
    train_with_observer(&cfg, &data, &dcfg, &sched, |tr| {
        assert!(tr.clipped_norm <= cfg.grad_clip_norm + 1e-9);
        clipped += usize::from(tr.grad_norm > cfg.grad_clip_norm);
        for c in tr.compositions {
            assert!(c.steps().windows(2).all(|w| w[0] <= w[1]));
            assert!(c.steps().iter().all(|&t| (1..=50).contains(&t)));
        }
    })
    .unwrap();
    assert!(clipped > 0);
}
