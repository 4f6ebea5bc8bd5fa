//! Named verification suites that produce [`Report`]s.
//!
//! Each suite is self-contained and seeded, so its report is reproducible.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{
    causal_mask, forward, loss_and_grad, loss_and_grad_seq, save_checkpoint, DenoiserConfig,
    DenoiserParams, Example,
};
use crate::error::{invalid, Result};
use crate::latent::LatentVideo;
use crate::lattice::{binomial, count_compositions, naive_sequential_sample, CountTables, TimestepComposition};
use crate::par;
use crate::sampling::{generate, generate_with, GenerationTrace, SampleConfig, SampleMode, X0Predictor};
use crate::schedule::{NoiseSchedule, TOY_TIMESTEPS};
use crate::training::{make_synthetic_dataset, train, train_with_observer, SyntheticDatasetSpec, TrainConfig};
use crate::trajectory::{expected_plan_len, plan_trajectory};
use crate::verification::{
    autoregressive_plan, chi_square_uniformity, composition_histogram, denoiser_finite_diff,
    enumerate_compositions, gradient_relative_errors, max_cell_zscore, synchronous_plan, total_variation,
    Constraint, EnumerationResult, Report, DEFAULT_ENUMERATION_CAP,
};

pub const SUITES: &[&str] = &[
    "counting",
    "scheduler",
    "fopp",
    "kernels",
    "gradients",
    "causality",
    "sampling",
    "training",
];

/// Runs the named suite, or every suite for `"all"`.
pub fn run_suite(name: &str, seed: u64) -> Result<Report> {
    match name {
        "counting" => counting(),
        "scheduler" => scheduler(),
        "fopp" => fopp(seed, 100_000, 1_000_000),
        "kernels" => kernels(),
        "gradients" => gradients(seed),
        "causality" => causality(seed),
        "sampling" => sampling(seed),
        "training" => training(seed, 200),
        "all" => {
            let mut report = Report::default();
            for s in SUITES {
                report.extend(run_suite(s, seed)?);
            }
            Ok(report)
        }
        other => Err(invalid(format!(
            "unknown suite {other:?}; expected one of {} or all",
            SUITES.join(", ")
        ))),
    }
}

/// Enumeration vs closed forms, and table recurrence vs `binomial`.
pub fn counting() -> Result<Report> {
    let mut r = Report::default();
    let mut enum_ok = true;
    for f in 1..=8usize {
        for t in 1..=8usize {
            let eq = enumerate_compositions(f, t, Constraint::Equal, DEFAULT_ENUMERATION_CAP)?;
            let nd = enumerate_compositions(f, t, Constraint::NonDecreasing, DEFAULT_ENUMERATION_CAP)?;
            enum_ok &= eq.count == t as u128 && binomial((t + f - 1) as u64, f as u64) == nd.count.into();
            let power = (t as u128).pow(f as u32);
            enum_ok &= match enumerate_compositions(f, t, Constraint::Independent, DEFAULT_ENUMERATION_CAP) {
                Ok(ind) => ind.count == power,
                Err(_) => power > DEFAULT_ENUMERATION_CAP,
            };
        }
    }
    r.exact("counting/enumeration_closed_forms_f8_t8", enum_ok);
    let mut dp_ok = true;
    for f in 1..=30 {
        for t in 1..=30 {
            dp_ok &= count_compositions(f, t).is_ok();
        }
    }
    r.exact("counting/tables_match_binomial_f30_t30", dp_ok);
    let big = count_compositions(16, 1000)?;
    r.exact(
        "counting/f16_t1000_exact",
        big.to_string() == "53855312085464377672249158113395375",
    );
    r.exact("counting/f3_t3_is_10", count_compositions(3, 3)? == 10u32.into());
    Ok(r)
}

/// AD plan structure: step-count law, limits, masks and monotonicity.
pub fn scheduler() -> Result<Report> {
    let mut r = Report::default();
    let (mut law, mut masks, mut shape, mut monotone, mut limits) = (true, true, true, true, true);
    for f in 1..=8 {
        for n in 1..=20 {
            let mut prev = 0;
            for s in 0..=n + 2 {
                let plan = plan_trajectory(f, n, s)?;
                law &= plan.len() == expected_plan_len(f, n, s);
                monotone &= plan.len() >= prev;
                prev = plan.len();
                let mut seen = vec![vec![false; n + 1]; f];
                for (k, step) in plan.steps.iter().enumerate() {
                    let before = plan.levels_before(k);
                    let c = &step.composition;
                    shape &= c.windows(2).all(|w| w[0] <= w[1]) && c.iter().all(|&g| g <= n);
                    for i in 0..f {
                        masks &= step.update_mask[i] == (c[i] != before[i]);
                        shape &= c[i] <= before[i];
                        if step.update_mask[i] {
                            shape &= !seen[i][c[i]];
                            seen[i][c[i]] = true;
                        }
                    }
                }
                shape &= plan.steps.last().is_some_and(|s| s.composition.iter().all(|&g| g == 0));
            }
            let comps = |s| -> Result<Vec<Vec<usize>>> {
                Ok(plan_trajectory(f, n, s)?.steps.into_iter().map(|x| x.composition).collect())
            };
            limits &= comps(0)? == synchronous_plan(f, n);
            limits &= comps(n)? == autoregressive_plan(f, n);
        }
    }
    r.exact("scheduler/step_count_law_f8_n20", law);
    r.exact("scheduler/mask_marks_changes", masks);
    r.exact("scheduler/plans_monotone_and_terminal", shape);
    r.exact("scheduler/length_nondecreasing_in_s", monotone);
    r.exact("scheduler/limits_synchronous_autoregressive", limits);
    let calls: Vec<usize> = [0, 5, 50]
        .iter()
        .map(|&s| plan_trajectory(16, 50, s).map(|p| p.len()))
        .collect::<Result<_>>()?;
    r.exact("scheduler/f16_n50_calls_50_125_800", calls == [50, 125, 800]);
    let strict = (0..=50)
        .map(|s| expected_plan_len(16, 50, s))
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| w[0] < w[1]);
    r.exact("scheduler/f16_n50_calls_strictly_increasing", strict);
    Ok(r)
}

/// Uniform per-anchor completions and the FoPP mixture law.
///
/// `per_anchor` draws for each anchor on `(3, 4)`, `mixture` draws on `(3, 3)`.
pub fn fopp(seed: u64, per_anchor: usize, mixture: usize) -> Result<Report> {
    let mut r = Report::default();
    let (f, t) = (3, 4);
    let tables = CountTables::build(f, t)?;
    let all = enumerate_compositions(f, t, Constraint::NonDecreasing, DEFAULT_ENUMERATION_CAP)?;
    for frame in 1..=f {
        for step in 1..=t {
            let compositions: Vec<Vec<usize>> = all
                .compositions
                .iter()
                .filter(|c| c[frame - 1] == step)
                .cloned()
                .collect();
            let k = compositions.len();
            let cells = EnumerationResult {
                compositions,
                count: k as u128,
            };
            let hist = composition_histogram(&cells, per_anchor, seed ^ ((frame * 16 + step) as u64), |rng| {
                tables.sample_anchored(frame, step, rng)
            })?;
            let chi = chi_square_uniformity(&hist, &vec![1.0 / k as f64; k])?;
            r.at_most(
                format!("fopp/anchor_f{frame}_t{step}_chi2"),
                chi.statistic,
                chi.critical,
            );
        }
    }

    let tables = CountTables::build(3, 3)?;
    let all = enumerate_compositions(3, 3, Constraint::NonDecreasing, DEFAULT_ENUMERATION_CAP)?;
    let expected: Vec<f64> = all
        .compositions
        .iter()
        .map(|c| Ok(tables.log_probability(&TimestepComposition::new(c.clone(), 3)?)?.exp()))
        .collect::<Result<_>>()?;
    r.at_most(
        "fopp/mixture_law_mass",
        (expected.iter().sum::<f64>() - 1.0).abs(),
        1e-12,
    );
    let hist = composition_histogram(&all, mixture, seed, |rng| tables.sample(rng))?;
    r.at_most("fopp/mixture_law_f3_t3_max_z", max_cell_zscore(&hist, &expected), 3.0);
    let naive = composition_histogram(&all, mixture, seed.wrapping_add(1), |rng| {
        naive_sequential_sample(3, 3, rng)
    })?;
    let naive_p: Vec<f64> = naive.iter().map(|&c| c as f64 / mixture as f64).collect();
    let tv = total_variation(&naive_p, &expected);
    r.at_most("fopp/naive_sampler_is_biased_neg_tv", -tv, -0.05);
    Ok(r)
}

/// Closed-form and oracle checks on the diffusion kernels.
pub fn kernels() -> Result<Report> {
    let mut r = Report::default();
    let sched = NoiseSchedule::default_linear(1000)?;
    let x0 = [0.3, -0.7, 1.1];
    let z = [0.9, 0.1, -0.4];
    let out = sched.posterior_step(&z, &x0, 1, &[0.5, -0.2, 1.0])?;
    r.exact("kernels/posterior_t1_is_x0", out == x0);

    let mut cur = vec![0.8, -1.2, 0.4];
    let grid: Vec<usize> = (0..=50).map(|g| g * 20).collect();
    for w in grid.windows(2).rev() {
        cur = sched.ddim_step(&cur, &x0, w[1], w[0])?;
    }
    let err = cur.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    r.at_most("kernels/ddim_oracle_chain", err, 1e-5);

    let small = NoiseSchedule::linear(10, 1e-2, 0.2)?;
    let eps = [0.4, -1.3, 0.2];
    let mut worst: f64 = 0.0;
    for t in 1..=10 {
        let zt = small.corrupt(&x0, t, &eps)?;
        for tp in 0..t {
            let a = small.ddim_step(&zt, &x0, t, tp)?;
            let b = small.corrupt(&x0, tp, &eps)?;
            worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
        }
    }
    r.at_most("kernels/corrupt_ddim_commute_t10", worst, 1e-6);
    let bars = sched.alpha_bars();
    r.exact(
        "kernels/alpha_bar_decreasing",
        bars[0] == 1.0 && bars.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0),
    );
    Ok(r)
}

/// Toy denoiser, synthetic batch and schedule used by the gradient and
/// causality suites. The output projection is randomised so every tensor
/// receives gradient.
pub fn toy_setup(seed: u64, batch: usize) -> Result<(DenoiserConfig, DenoiserParams, Vec<Example>, NoiseSchedule)> {
    let t = TOY_TIMESTEPS;
    let cfg = DenoiserConfig::new(8, 1, 2, t);
    let sched = NoiseSchedule::default_linear(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = DenoiserParams::init(&cfg, &mut rng);
    let bound = 1.0 / (cfg.d_model as f64).sqrt();
    for tensor in params.tensors.iter_mut().filter(|t| t.name.starts_with("out_")) {
        for v in &mut tensor.data {
            *v = rng.random_range(-bound..bound);
        }
    }
    let data = make_synthetic_dataset(&SyntheticDatasetSpec {
        n_sequences: batch,
        seed,
        ..Default::default()
    })?;
    let tables = CountTables::build(cfg.frames, t)?;
    let examples = data
        .into_iter()
        .map(|z| {
            let eps = (0..z.data().len()).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            Ok(Example {
                composition: tables.sample(&mut rng),
                eps: LatentVideo::new(z.frames(), z.tokens(), z.dim(), eps)?,
                z0: z.scaled(0.5),
            })
        })
        .collect::<Result<_>>()?;
    Ok((cfg, params, examples, sched))
}

/// Analytic gradients against central differences on the toy setup.
pub fn gradients(seed: u64) -> Result<Report> {
    let mut r = Report::default();
    let (cfg, params, batch, sched) = toy_setup(seed, 2)?;
    let (_, analytic) = loss_and_grad(&params, &cfg, &batch, &sched)?;
    let numeric = denoiser_finite_diff(&params, &cfg, &batch, &sched, 1e-5);
    for e in gradient_relative_errors(&analytic, &numeric, 1e-9) {
        r.at_most(format!("gradients/{}", e.name), e.relative_error, 1e-3);
    }
    let coarse = denoiser_finite_diff(&params, &cfg, &batch[..1], &sched, 1e-1);
    let (_, analytic_one) = loss_and_grad(&params, &cfg, &batch[..1], &sched)?;
    let worst = gradient_relative_errors(&analytic_one, &coarse, 1e-9)
        .iter()
        .map(|e| e.relative_error)
        .fold(0.0, f64::max);
    r.at_most("gradients/coarse_step_degrades_neg", -worst, -1e-3);
    let (_, seq) = loss_and_grad_seq(&params, &cfg, &batch, &sched)?;
    r.exact("gradients/parallel_matches_sequential", seq == analytic);
    Ok(r)
}

/// Perturbing frame `j` must leave predictions for frames `< j` bit-identical.
pub fn causality(seed: u64) -> Result<Report> {
    let mut r = Report::default();
    let (cfg, params, batch, sched) = toy_setup(seed, 2)?;
    let mask = causal_mask(cfg.frames, cfg.tokens);
    let mut mask_ok = true;
    for q in 0..cfg.frames {
        for k in 0..cfg.frames {
            mask_ok &= mask.get(q, k) == (k <= q);
        }
    }
    r.exact("causality/mask_block_triangular", mask_ok);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let mut exact = true;
    for ex in &batch {
        let z = ex.corrupted(&sched)?;
        let base = forward(&params, &cfg, &z, &ex.composition, &sched)?;
        for j in 1..cfg.frames {
            let mut moved = z.clone();
            for f in j..cfg.frames {
                for v in moved.frame_mut(f) {
                    *v += rng.random_range(-3.0..3.0);
                }
            }
            let mut steps = ex.composition.steps().to_vec();
            steps[cfg.frames - 1] = cfg.max_timestep;
            let comp = TimestepComposition::new(steps, cfg.max_timestep)?;
            let out = forward(&params, &cfg, &moved, &comp, &sched)?;
            for f in 0..j {
                exact &= out.frame(f) == base.frame(f);
            }
        }
    }
    r.exact("causality/earlier_frames_unchanged", exact);
    Ok(r)
}

struct FixedTarget(LatentVideo);

impl X0Predictor for FixedTarget {
    fn predict(&self, _: &LatentVideo, _: &TimestepComposition, _: &NoiseSchedule) -> Result<LatentVideo> {
        Ok(self.0.clone())
    }
}

/// Sampler audits with a fixed-target predictor plus determinism of a real
/// denoiser in every mode.
pub fn sampling(seed: u64) -> Result<Report> {
    let mut r = Report::default();
    let sched = NoiseSchedule::default_linear(TOY_TIMESTEPS)?;
    let target = LatentVideo::new(
        16,
        1,
        2,
        (0..32).map(|i| (i as f64 * 0.41).cos() * 0.5).collect(),
    )?;
    let oracle = FixedTarget(target.clone());
    let run = |diff, mode| -> Result<(LatentVideo, GenerationTrace)> {
        let cfg = SampleConfig {
            frames: 16,
            grid_steps: 50,
            diff,
            mode,
            seed,
            scale_factor: 0.5,
        };
        let mut trace = GenerationTrace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = generate_with(&oracle, &sched, &cfg, (1, 2), &mut rng, Some(&mut trace))?;
        Ok((out, trace))
    };

    let (out, trace) = run(0, SampleMode::RecorruptDeterministic)?;
    let err = out
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b / 0.5).abs())
        .fold(0.0, f64::max);
    r.at_most("sampling/oracle_chain_s0", err, 1e-5);
    r.exact("sampling/s0_calls_n", trace.model_calls == 50);
    r.exact(
        "sampling/s0_synchronous",
        trace.conditioning.iter().all(|c| c.iter().all(|&t| t == c[0])),
    );

    let mut audit = true;
    for diff in [0, 5, 50] {
        let plan = plan_trajectory(16, 50, diff)?;
        let (_, trace) = run(diff, SampleMode::RecorruptStochastic)?;
        audit &= trace.model_calls == plan.len();
        let mut want = Vec::new();
        for (k, step) in plan.steps.iter().enumerate() {
            let before = plan.levels_before(k);
            for f in 0..16 {
                if step.update_mask[f] {
                    want.push((k + 1, f + 1, before[f], step.composition[f]));
                }
            }
        }
        let got: Vec<_> = trace
            .transitions
            .iter()
            .map(|t| (t.step, t.frame, t.from_level, t.to_level))
            .collect();
        audit &= got == want;
        if diff == 50 {
            let mut order = Vec::new();
            for t in &trace.transitions {
                if order.last() != Some(&t.frame) {
                    order.push(t.frame);
                }
            }
            r.exact("sampling/s_n_frame_sequential", order == (1..=16).collect::<Vec<_>>());
        }
        if diff == 5 {
            r.exact("sampling/f16_n50_s5_calls_125", trace.model_calls == 125);
        }
    }
    r.exact("sampling/transitions_match_plan", audit);

    let (dcfg, params, _, _) = toy_setup(seed, 1)?;
    let mut det = true;
    for mode in [
        SampleMode::RecorruptDeterministic,
        SampleMode::RecorruptStochastic,
        SampleMode::Posterior,
    ] {
        let cfg = SampleConfig {
            frames: 8,
            grid_steps: if mode == SampleMode::Posterior { 100 } else { 50 },
            diff: 5,
            mode,
            seed,
            scale_factor: 0.5,
        };
        let once = || generate(&params, &dcfg, &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = (once()?, once()?);
        det &= a == b && a.data().iter().all(|v| v.is_finite());
    }
    r.exact("sampling/seeded_runs_identical", det);
    Ok(r)
}

/// A short training run: determinism, clipping, EMA and composition validity.
pub fn training(seed: u64, steps: usize) -> Result<Report> {
    let mut r = Report::default();
    let data_spec = SyntheticDatasetSpec {
        n_sequences: 64,
        seed,
        ..Default::default()
    };
    let data = make_synthetic_dataset(&data_spec)?;
    let t = TOY_TIMESTEPS;
    let dcfg = DenoiserConfig::new(8, 1, 2, t);
    let sched = NoiseSchedule::default_linear(t)?;
    let cfg = TrainConfig {
        steps,
        seed,
        ..Default::default()
    };
    let mut clip_ok = true;
    let mut comps_ok = true;
    let mut trajectory = Vec::new();
    let mut emas = Vec::new();
    let out = train_with_observer(&cfg, &data, &dcfg, &sched, |tr| {
        clip_ok &= tr.clipped_norm <= cfg.grad_clip_norm + 1e-9;
        comps_ok &= tr
            .compositions
            .iter()
            .all(|c| c.steps().windows(2).all(|w| w[0] <= w[1]) && c.steps().iter().all(|&s| (1..=t).contains(&s)));
        if tr.step < 10 {
            trajectory.push(tr.params.clone());
            emas.push(tr.ema.clone());
        }
    })?;
    r.exact("training/clipped_norm_bounded", clip_ok);
    r.exact("training/compositions_valid", comps_ok);
    let d = cfg.ema_decay;
    let mut ema_err: f64 = 0.0;
    for (k, ema) in emas.iter().enumerate() {
        // closed form: d^(k+1) p_init + sum_j (1 - d) d^(k - j) p_j
        let mut want = out.initial.clone();
        want.scale(d.powi(k as i32 + 1));
        for (j, p) in trajectory.iter().enumerate().take(k + 1) {
            want.add_scaled(p, (1.0 - d) * d.powi((k - j) as i32));
        }
        for (a, b) in ema.iter_scalars().zip(want.iter_scalars()) {
            ema_err = ema_err.max((a - b).abs());
        }
    }
    r.at_most("training/ema_matches_recomputation", ema_err, 1e-12);
    let again = train(&cfg, &data, &dcfg, &sched)?;
    let same = again.log.iter().zip(&out.log).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits())
        && again.params == out.params;
    r.exact("training/seeded_runs_identical", same);
    r.exact("training/loss_finite", out.log.iter().all(|l| l.loss.is_finite()));
    let mut ckpt = Vec::new();
    save_checkpoint(&mut ckpt, &dcfg, &out.ema)?;
    r.exact("training/checkpoint_written", !ckpt.is_empty());
    Ok(r)
}

/// Mean consecutive-frame rotation angle per sequence minus its `omega`.
pub fn angle_residuals(spec: &SyntheticDatasetSpec) -> Result<Vec<f64>> {
    let seqs = crate::training::make_synthetic_sequences(spec)?;
    let mut out = Vec::with_capacity(seqs.len());
    for s in seqs {
        let z = &s.latent;
        let mut acc = 0.0;
        let mut n = 0usize;
        for f in 1..z.frames() {
            for tok in 0..z.tokens() {
                let a = &z.frame(f - 1)[tok * z.dim()..];
                let b = &z.frame(f)[tok * z.dim()..];
                let d = b[1].atan2(b[0]) - a[1].atan2(a[0]);
                acc += (d + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
                n += 1;
            }
        }
        out.push(acc / n as f64 - s.omega);
    }
    Ok(out)
}

/// Histogram of `n` FoPP draws keyed by composition, sorted.
pub fn fopp_histogram(frames: usize, timesteps: usize, n: usize, seed: u64) -> Result<Vec<(Vec<usize>, u64)>> {
    let tables = CountTables::build(frames, timesteps)?;
    let counts = par::monte_carlo(
        n,
        seed,
        HashMap::<Vec<usize>, u64>::new,
        |acc, rng| *acc.entry(tables.sample(rng).into_steps()).or_default() += 1,
        |a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
        },
    );
    let mut out: Vec<_> = counts.into_iter().collect();
    out.sort();
    Ok(out)
}
