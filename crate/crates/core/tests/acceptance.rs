//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::time::{Duration, Instant};

use ardiff::checks::{self, toy_setup};
use ardiff::denoiser::{load_checkpoint, loss_and_grad, save_checkpoint, DenoiserConfig};
use ardiff::lattice::{binomial, count_compositions, naive_sequential_sample, CountTables};
use ardiff::par::monte_carlo;
use ardiff::sampling::{generate, SampleConfig, SampleMode};
use ardiff::schedule::TOY_TIMESTEPS;
use ardiff::training::{make_synthetic_dataset, train, SyntheticDatasetSpec, TrainConfig};
use ardiff::trajectory::plan_trajectory;
use ardiff::verification::{
    autoregressive_plan, denoiser_finite_diff, enumerate_compositions, gradient_relative_errors,
    synchronous_plan, Constraint, Report, DEFAULT_ENUMERATION_CAP,
};
use ardiff::{NoiseSchedule, TimestepComposition};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn report_outcome(r: Report) -> Result<(), String> {
    let failed: Vec<String> = r.lines.iter().filter(|l| !l.pass).map(|l| l.to_string()).collect();
    ensure(failed.is_empty(), failed.join("; "))
}

fn within(elapsed: Duration, limit: f64) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit,
        format!("took {:.2}s, limit {limit}s", elapsed.as_secs_f64()),
    )
}

fn search_space_counts() -> Outcome {
    let start = Instant::now();
    let t = 1000u64;
    let equal = BigUint::from(t);
    let independent = BigUint::from(t).pow(16);
    let nd = count_compositions(16, 1000).map_err(|e| e.to_string())?;
    ensure(equal.to_string() == "1000", "equal count")?;
    ensure(independent.to_string().len() == 49, "independent count is not 1e48")?;
    ensure(nd == binomial(1015, 16), "non-decreasing count")?;
    for f in 1..=30 {
        for t in 1..=30 {
            count_compositions(f, t).map_err(|e| e.to_string())?;
        }
    }
    let counts: Vec<u128> = [Constraint::Equal, Constraint::Independent, Constraint::NonDecreasing]
        .iter()
        .map(|&c| enumerate_compositions(3, 3, c, DEFAULT_ENUMERATION_CAP).map(|e| e.count))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure(counts == [3, 27, 10], format!("F=3 T=3 enumeration gave {counts:?}"))?;
    within(start.elapsed(), 1.0)?;
    Ok(format!("non-decreasing(16, 1000) = {nd} (~{:.2e}); F=3,T=3 -> 3/27/10", f64_of(&nd)))
}

fn f64_of(v: &BigUint) -> f64 {
    v.to_string().parse().unwrap_or(f64::INFINITY)
}

fn naive_scheduler_bias() -> Outcome {
    let start = Instant::now();
    let (f, t, n) = (16usize, 1000usize, 1_000_000usize);
    let hits = monte_carlo(
        n,
        2024,
        || 0u64,
        |acc, rng| *acc += u64::from(naive_sequential_sample(f, t, rng).steps()[0] == t),
        |a, b| *a += b,
    );
    let p = 1.0 / t as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    let z = (hits as f64 - n as f64 * p).abs() / sd;
    ensure(z <= 3.0, format!("naive all-T hits {hits}, z = {z:.2}"))?;
    let tables = CountTables::build(f, t).map_err(|e| e.to_string())?;
    let top = TimestepComposition::new(vec![t; f], t).map_err(|e| e.to_string())?;
    let p_fopp = tables.log_probability(&top).map_err(|e| e.to_string())?.exp();
    let n_min = (1..=f)
        .map(|i| tables.anchored_count(i, t))
        .min()
        .expect("F >= 1");
    let bound = f as f64 / (f as f64 * t as f64 * f64_of(&n_min));
    ensure(p_fopp <= bound, format!("FoPP {p_fopp:e} above bound {bound:e}"))?;
    ensure(p_fopp * 10.0 < p, format!("FoPP {p_fopp:e} not far below naive {p:e}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "naive P(all-T) = {:.3e} (z = {z:.2}); FoPP P(all-T) = {p_fopp:.3e} <= {bound:.1e}",
        hits as f64 / n as f64
    ))
}

fn fopp_uniformity() -> Outcome {
    let start = Instant::now();
    report_outcome(checks::fopp(31, 100_000, 1_000_000).map_err(|e| e.to_string())?)?;
    within(start.elapsed(), 60.0)?;
    Ok("12 anchors on F=3,T=4 pass chi-square at 99.9%; F=3,T=3 mixture law within 3 sigma".into())
}

fn step_count_law() -> Outcome {
    let start = Instant::now();
    for f in 1..=8 {
        for n in 1..=20 {
            for s in 0..=n + 2 {
                let len = plan_trajectory(f, n, s).map_err(|e| e.to_string())?.len();
                ensure(len == n + (f - 1) * s.min(n), format!("F={f} N={n} s={s}: {len}"))?;
            }
        }
    }
    let calls: Vec<usize> = (0..=50)
        .map(|s| plan_trajectory(16, 50, s).map(|p| p.len()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure((calls[0], calls[5], calls[50]) == (50, 125, 800), "F=16 N=50 calls")?;
    ensure(calls.windows(2).all(|w| w[0] < w[1]), "calls not strictly increasing")?;
    within(start.elapsed(), 5.0)?;
    Ok("exhaustive F<=8, N<=20, s<=N+2; F=16,N=50: 50/125/800".into())
}

fn limiting_cases() -> Outcome {
    for f in 1..=8 {
        for n in 1..=20 {
            let comps = |s| -> Result<Vec<Vec<usize>>, String> {
                Ok(plan_trajectory(f, n, s)
                    .map_err(|e| e.to_string())?
                    .steps
                    .into_iter()
                    .map(|x| x.composition)
                    .collect())
            };
            ensure(comps(0)? == synchronous_plan(f, n), format!("s=0 at F={f} N={n}"))?;
            ensure(comps(n)? == autoregressive_plan(f, n), format!("s=N at F={f} N={n}"))?;
        }
    }
    Ok("s=0 == synchronous and s=N == autoregressive, element-wise".into())
}

fn kernel_correctness() -> Outcome {
    report_outcome(checks::kernels().map_err(|e| e.to_string())?)?;
    Ok("posterior t=1 exact; DDIM oracle chain < 1e-5; commutation < 1e-6 on T=10".into())
}

fn gradient_validity() -> Outcome {
    let start = Instant::now();
    let (cfg, params, batch, sched) = toy_setup(0, 2).map_err(|e| e.to_string())?;
    let (_, analytic) = loss_and_grad(&params, &cfg, &batch, &sched).map_err(|e| e.to_string())?;
    let numeric = denoiser_finite_diff(&params, &cfg, &batch, &sched, 1e-5);
    let errs = gradient_relative_errors(&analytic, &numeric, 1e-9);
    let worst = errs.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error)).expect("tensors");
    ensure(worst.relative_error < 1e-3, format!("{}: {:e}", worst.name, worst.relative_error))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "{} tensors, worst relative error {:.2e} ({})",
        errs.len(),
        worst.relative_error,
        worst.name
    ))
}

fn causality() -> Outcome {
    report_outcome(checks::causality(17).map_err(|e| e.to_string())?)?;
    Ok("frames < j bit-identical under any change to frames >= j".into())
}

fn toy_run(seed: u64) -> Result<(Vec<u8>, ardiff::training::TrainOutput), String> {
    let data = make_synthetic_dataset(&SyntheticDatasetSpec::default()).map_err(|e| e.to_string())?;
    let dcfg = DenoiserConfig::new(8, 1, 2, TOY_TIMESTEPS);
    let sched = NoiseSchedule::default_linear(TOY_TIMESTEPS).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    let out = train(&cfg, &data, &dcfg, &sched).map_err(|e| e.to_string())?;
    let bits = out.log.iter().flat_map(|r| r.loss.to_le_bytes()).collect();
    Ok((bits, out))
}

fn training_smoke() -> Outcome {
    let start = Instant::now();
    let (bits_a, out) = toy_run(0)?;
    let (head, tail) = (out.head_mean(100), out.tail_mean(100));
    let ratio = tail / head;
    ensure(ratio <= 0.2, format!("tail/head = {tail:.4}/{head:.4} = {ratio:.3}"))?;
    let (bits_b, _) = toy_run(0)?;
    ensure(bits_a == bits_b, "loss logs differ between seeded runs")?;
    within(start.elapsed(), 300.0)?;
    Ok(format!("loss {head:.4} -> {tail:.4} (ratio {ratio:.3}); logs bit-identical"))
}

fn pipeline(seed: u64) -> Result<Vec<Vec<u8>>, String> {
    let t = TOY_TIMESTEPS;
    let data = make_synthetic_dataset(&SyntheticDatasetSpec {
        n_sequences: 64,
        seed,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let dcfg = DenoiserConfig::new(8, 1, 2, t);
    let sched = NoiseSchedule::default_linear(t).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: 100,
        seed,
        ..Default::default()
    };
    let out = train(&cfg, &data, &dcfg, &sched).map_err(|e| e.to_string())?;
    let mut ckpt = Vec::new();
    save_checkpoint(&mut ckpt, &dcfg, &out.ema).map_err(|e| e.to_string())?;
    let (dcfg, params) = load_checkpoint(&ckpt[..]).map_err(|e| e.to_string())?;
    let mut files = vec![ckpt];
    for mode in [SampleMode::RecorruptDeterministic, SampleMode::RecorruptStochastic, SampleMode::Posterior] {
        let n = if mode == SampleMode::Posterior { t } else { 50 };
        for diff in [0, 5, n] {
            let sc = SampleConfig {
                frames: 8,
                grid_steps: n,
                diff,
                mode,
                seed,
                scale_factor: cfg.scale_factor,
            };
            let z = generate(&params, &dcfg, &sched, &sc, &mut ChaCha8Rng::seed_from_u64(seed))
                .map_err(|e| e.to_string())?;
            let mut buf = Vec::new();
            z.write_to(&mut buf, sc.scale_factor).map_err(|e| e.to_string())?;
            files.push(buf);
        }
    }
    Ok(files)
}

fn end_to_end_determinism() -> Outcome {
    let a = pipeline(5)?;
    let b = pipeline(5)?;
    ensure(a == b, "pipeline outputs differ between seeded runs")?;
    let c = pipeline(6)?;
    ensure(a[1..] != c[1..], "different seeds gave identical outputs")?;
    Ok(format!("checkpoint + {} latent files byte-identical", a.len() - 1))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("search-space counts", search_space_counts),
        ("naive-scheduler bias", naive_scheduler_bias),
        ("FoPP conditional uniformity", fopp_uniformity),
        ("AD step-count law", step_count_law),
        ("limiting-case equivalence", limiting_cases),
        ("diffusion-kernel correctness", kernel_correctness),
        ("gradient validity", gradient_validity),
        ("causality", causality),
        ("training smoke", training_smoke),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
