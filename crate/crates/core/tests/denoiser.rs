use ardiff::checks::toy_setup;
use ardiff::denoiser::{forward, load_checkpoint, loss, loss_and_grad, save_checkpoint, DenoiserParams};
use ardiff::verification::{denoiser_finite_diff, gradient_relative_errors};
use ardiff::TimestepComposition;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradients_match_finite_differences() {
    let (cfg, params, batch, sched) = toy_setup(7, 2).unwrap();
    let (_, analytic) = loss_and_grad(&params, &cfg, &batch, &sched).unwrap();
    let numeric = denoiser_finite_diff(&params, &cfg, &batch, &sched, 1e-5);
    for e in gradient_relative_errors(&analytic, &numeric, 1e-9) {
        assert!(e.relative_error < 1e-3, "{}: {}", e.name, e.relative_error);
    }
}

#[test]
fn coarse_step_is_a_negative_control() {
    let (cfg, params, batch, sched) = toy_setup(7, 1).unwrap();
    let (_, analytic) = loss_and_grad(&params, &cfg, &batch, &sched).unwrap();
    let coarse = denoiser_finite_diff(&params, &cfg, &batch, &sched, 1e-1);
    let worst = gradient_relative_errors(&analytic, &coarse, 1e-9)
        .into_iter()
        .map(|e| e.relative_error)
        .fold(0.0, f64::max);
    assert!(worst > 1e-3);
}

#[test]
fn fresh_model_predicts_zero() {
    let (cfg, _, batch, sched) = toy_setup(1, 3).unwrap();
    let params = DenoiserParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let z = batch[0].corrupted(&sched).unwrap();
    let out = forward(&params, &cfg, &z, &batch[0].composition, &sched).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    let want: f64 = batch.iter().map(|ex| ex.z0.data().iter().map(|v| v * v).sum::<f64>() / 16.0).sum::<f64>() / 3.0;
    assert!((loss(&params, &cfg, &batch, &sched).unwrap() - want).abs() < 1e-12);
}

#[test]
fn batch_permutation_invariance() {
    let (cfg, params, mut batch, sched) = toy_setup(2, 4).unwrap();
    let (l1, g1) = loss_and_grad(&params, &cfg, &batch, &sched).unwrap();
    batch.reverse();
    let (l2, g2) = loss_and_grad(&params, &cfg, &batch, &sched).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    for (a, b) in g1.iter_scalars().zip(g2.iter_scalars()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn checkpoint_file_roundtrip() {
    let (cfg, params, _, _) = toy_setup(4, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(std::fs::File::create(&path).unwrap(), &cfg, &params).unwrap();
    let (cfg2, p2) = load_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(cfg2, cfg);
    for (a, b) in params.iter_scalars().zip(p2.iter_scalars()) {
        assert_eq!(*a as f32 as f64, *b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn strict_causality(seed in any::<u64>(), j in 1usize..8, bump in 1usize..50) {
        let (cfg, params, batch, sched) = toy_setup(seed % 1000, 1).unwrap();
        let ex = &batch[0];
        let z = ex.corrupted(&sched).unwrap();
        let base = forward(&params, &cfg, &z, &ex.composition, &sched).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut moved = z.clone();
        for f in j..cfg.frames {
            for v in moved.frame_mut(f) {
                *v = rng.random_range(-5.0..5.0);
            }
        }
        let mut steps = ex.composition.steps().to_vec();
        for s in steps.iter_mut().skip(j) {
            *s = (*s + bump).min(cfg.max_timestep);
        }
        let comp = TimestepComposition::new(steps, cfg.max_timestep).unwrap();
        let out = forward(&params, &cfg, &moved, &comp, &sched).unwrap();
        for f in 0..j {
            prop_assert_eq!(out.frame(f), base.frame(f));
        }
    }
}
