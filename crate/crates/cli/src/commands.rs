use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ardiff::checks;
use ardiff::denoiser::{load_checkpoint, save_checkpoint, DenoiserConfig};
use ardiff::lattice::{binomial, count_compositions, CountTables};
use ardiff::par::stream_rng;
use ardiff::sampling::{generate as sample, SampleConfig, SampleMode};
use ardiff::training::{make_synthetic_dataset, train as fit, write_loss_csv, Optimizer};
use ardiff::verification::{enumerate_compositions, Constraint};
use ardiff::{plan_trajectory, LatentVideo, TimestepComposition};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{resolve, RunConfig};
use crate::{CliError, CountArgs, GenerateArgs, PlanArgs, SampleCompositionArgs, TrainArgs, VerifyArgs};

type Out<'a> = &'a mut dyn Write;

/// `5.4e34`-style rendering of an arbitrarily large integer.
pub fn scientific(v: &BigUint) -> String {
    let digits = v.to_string();
    if digits.len() == 1 {
        return format!("{digits}.0e0");
    }
    let lead: u32 = digits[..2].parse().expect("decimal digits");
    let round_up = digits.as_bytes().get(2).is_some_and(|&d| d >= b'5');
    let mut mantissa = lead + u32::from(round_up);
    let mut exp = digits.len() - 1;
    if mantissa == 100 {
        mantissa = 10;
        exp += 1;
    }
    format!("{}.{}e{}", mantissa / 10, mantissa % 10, exp)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::failure(format!("cannot create {}: {e}", dir.display())))?;
    }
    let file = File::create(path).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))
}

fn tables(frames: usize, timesteps: usize, cache: Option<&Path>) -> Result<CountTables, CliError> {
    match cache {
        Some(p) if p.exists() => {
            let t = CountTables::read_from(std::io::BufReader::new(open(p)?))?;
            if (t.frames(), t.timesteps()) != (frames, timesteps) {
                return Err(CliError::usage(format!(
                    "table cache {} holds F={} T={}, wanted F={frames} T={timesteps}",
                    p.display(),
                    t.frames(),
                    t.timesteps()
                )));
            }
            Ok(t)
        }
        Some(p) => {
            let t = CountTables::build(frames, timesteps)?;
            let mut w = create(p)?;
            t.write_to(&mut w)?;
            w.flush()?;
            Ok(t)
        }
        None => Ok(CountTables::build(frames, timesteps)?),
    }
}

pub fn count(a: &CountArgs, out: Out) -> Result<(), CliError> {
    let (f, t) = (a.frames as usize, a.timesteps as usize);
    let nd = match &a.tables {
        Some(p) => {
            let total = tables(f, t, Some(p))?.total();
            if total != binomial((t + f - 1) as u64, f as u64) {
                return Err(CliError::failure("count tables disagree with the closed form"));
            }
            total
        }
        None => count_compositions(f, t)?,
    };
    let equal = BigUint::from(t);
    let independent = BigUint::from(t).pow(a.frames);
    writeln!(out, "frames {f}, timesteps {t}")?;
    writeln!(out, "non-decreasing\t{nd}\t≈{}", scientific(&nd))?;
    writeln!(out, "equal\t{equal}\t≈{}", scientific(&equal))?;
    writeln!(out, "independent\t{independent}\t≈{}", scientific(&independent))?;
    Ok(())
}

pub fn plan(a: &PlanArgs, out_dir: &Path, out: Out) -> Result<(), CliError> {
    let (f, n, s) = (a.frames as usize, a.steps as usize, a.diff as usize);
    let mut plan = plan_trajectory(f, n, s)?;
    if let Some(t) = a.timesteps {
        plan = plan.with_timesteps(t as usize)?;
    }
    let path = resolve(out_dir, a.output.as_deref(), &format!("plan_f{f}_n{n}_s{s}.jsonl"));
    let mut w = create(&path)?;
    plan.write_jsonl(&mut w)?;
    w.flush()?;
    writeln!(out, "steps\t{}", plan.len())?;
    writeln!(out, "denoiser_calls\t{}", plan.len())?;
    writeln!(out, "plan\t{}", path.display())?;
    Ok(())
}

fn parse_optimizer(s: &str) -> Result<Optimizer, CliError> {
    match s {
        "adam" => Ok(Optimizer::Adam),
        "sgd" => Ok(Optimizer::Sgd),
        other => Err(CliError::usage(format!("unknown optimizer {other:?}; expected adam or sgd"))),
    }
}

fn dataset(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<LatentVideo>, CliError> {
    let spec = &cfg.dataset;
    let Some(cache) = cfg.dataset_cache.as_deref().map(|p| resolve(out_dir, Some(p), "")) else {
        return Ok(make_synthetic_dataset(spec)?);
    };
    let (f, l, d) = (spec.frames, spec.tokens, spec.dim);
    if cache.exists() {
        let (stacked, _) = LatentVideo::read_from(std::io::BufReader::new(open(&cache)?))?;
        if stacked.shape() != (spec.n_sequences * f, l, d) {
            return Err(CliError::usage(format!(
                "dataset cache {} has shape {:?}, config wants {} sequences of ({f}, {l}, {d})",
                cache.display(),
                stacked.shape(),
                spec.n_sequences
            )));
        }
        return stacked
            .data()
            .chunks(f * l * d)
            .map(|c| LatentVideo::new(f, l, d, c.to_vec()).map_err(CliError::from))
            .collect();
    }
    let data = make_synthetic_dataset(spec)?;
    // Train on the f32-rounded values so cold and warm runs see identical data.
    let flat: Vec<f64> = data
        .iter()
        .flat_map(|z| z.data().iter().map(|&v| v as f32 as f64))
        .collect();
    let stacked = LatentVideo::new(spec.n_sequences * f, l, d, flat)?;
    let mut w = create(&cache)?;
    stacked.write_to(&mut w, 1.0)?;
    w.flush()?;
    Ok(stacked
        .data()
        .chunks(f * l * d)
        .map(|c| LatentVideo::new(f, l, d, c.to_vec()))
        .collect::<ardiff::Result<_>>()?)
}

pub fn train(a: &TrainArgs, mut cfg: RunConfig, out_dir: &Path, out: Out) -> Result<(), CliError> {
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(o) = &a.optimizer {
        cfg.train.optimizer = parse_optimizer(o)?;
    }
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let dcfg = cfg.denoiser();
    let data = dataset(&cfg, out_dir)?;
    let result = fit(&cfg.train, &data, &dcfg, &sched)?;

    let ckpt = resolve(out_dir, a.checkpoint.as_deref().or(cfg.checkpoint.as_deref()), "checkpoint.bin");
    let mut w = create(&ckpt)?;
    save_checkpoint(&mut w, &dcfg, &result.ema)?;
    w.flush()?;
    let csv = resolve(out_dir, a.loss_csv.as_deref(), "loss.csv");
    let mut w = create(&csv)?;
    write_loss_csv(&mut w, &result.log)?;
    w.flush()?;

    let k = 100.min(result.log.len());
    writeln!(out, "steps\t{}", result.log.len())?;
    writeln!(out, "initial_loss_mean\t{:.6}", result.head_mean(k))?;
    writeln!(out, "final_loss_mean\t{:.6}", result.tail_mean(k))?;
    writeln!(out, "checkpoint\t{}", ckpt.display())?;
    writeln!(out, "loss_csv\t{}", csv.display())?;
    Ok(())
}

fn config_mismatch(want: &DenoiserConfig, got: &DenoiserConfig) -> Vec<String> {
    let mut diffs = Vec::new();
    let mut check = |name: &str, a: String, b: String| {
        if a != b {
            diffs.push(format!("{name}: config {a}, checkpoint {b}"));
        }
    };
    check("frames", want.frames.to_string(), got.frames.to_string());
    check("tokens", want.tokens.to_string(), got.tokens.to_string());
    check("dim", want.dim.to_string(), got.dim.to_string());
    check("d_model", want.d_model.to_string(), got.d_model.to_string());
    check("n_layers", want.n_layers.to_string(), got.n_layers.to_string());
    check("n_heads", want.n_heads.to_string(), got.n_heads.to_string());
    check("mlp_hidden", want.mlp_hidden.to_string(), got.mlp_hidden.to_string());
    check("x0_clamp", want.x0_clamp.to_string(), got.x0_clamp.to_string());
    check("timesteps", want.max_timestep.to_string(), got.max_timestep.to_string());
    diffs
}

pub fn generate(a: &GenerateArgs, mut cfg: RunConfig, out_dir: &Path, out: Out) -> Result<(), CliError> {
    if let Some(s) = a.diff {
        cfg.sample.diff = s;
    }
    if let Some(n) = a.steps {
        cfg.sample.grid_steps = n;
    }
    if let Some(m) = &a.mode {
        cfg.sample.mode = m.parse::<SampleMode>()?;
    }
    if let Some(seed) = a.seed {
        cfg.sample.seed = seed;
    }
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let ckpt = resolve(out_dir, a.checkpoint.as_deref().or(cfg.checkpoint.as_deref()), "checkpoint.bin");
    let (dcfg, params) = load_checkpoint(std::io::BufReader::new(open(&ckpt)?))?;
    let diffs = config_mismatch(&cfg.denoiser(), &dcfg);
    if !diffs.is_empty() {
        return Err(CliError::usage(format!(
            "checkpoint {} does not match the config: {}",
            ckpt.display(),
            diffs.join("; ")
        )));
    }
    let sc = SampleConfig {
        frames: dcfg.frames,
        grid_steps: cfg.sample.grid_steps,
        diff: cfg.sample.diff,
        mode: cfg.sample.mode,
        seed: cfg.sample.seed,
        scale_factor: cfg.train.scale_factor,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let z = sample(&params, &dcfg, &sched, &sc, &mut rng)?;

    let path = resolve(out_dir, a.output.as_deref(), &format!("sample_s{}.bin", sc.diff));
    let mut w = create(&path)?;
    z.write_to(&mut w, sc.scale_factor)?;
    w.flush()?;
    writeln!(out, "denoiser_calls\t{}", plan_trajectory(sc.frames, sc.grid_steps, sc.diff)?.len())?;
    writeln!(out, "latent\t{}", path.display())?;
    if let Some(csv) = &a.csv {
        let csv = resolve(out_dir, Some(csv), "");
        let mut w = create(&csv)?;
        z.write_csv(&mut w)?;
        w.flush()?;
        writeln!(out, "csv\t{}", csv.display())?;
    }
    Ok(())
}

pub fn verify(a: &VerifyArgs, out_dir: &Path, out: Out) -> Result<(), CliError> {
    let report = checks::run_suite(&a.suite, a.seed)?;
    report.write_text(&mut *out)?;
    if let Some(p) = &a.report {
        let path = resolve(out_dir, Some(p), "");
        let mut w = create(&path)?;
        report.write_text(&mut w)?;
        w.flush()?;
    }
    if report.all_pass() {
        Ok(())
    } else {
        let failed = report.lines.iter().filter(|l| !l.pass).count();
        Err(CliError::failure(format!("{failed} verification checks failed")))
    }
}

/// Enumerate every composition when there are at most this many.
const LIST_ALL_CAP: u128 = 100_000;

pub fn sample_composition(a: &SampleCompositionArgs, out: Out) -> Result<(), CliError> {
    let (f, t, n) = (a.frames as usize, a.timesteps as usize, a.n);
    if n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let tables = tables(f, t, a.tables.as_deref())?;
    writeln!(out, "# FoPP draws F={f} T={t} n={n} seed={}", a.seed)?;
    let mut rng = stream_rng(a.seed, 0);
    for i in 0..a.list.min(n) {
        writeln!(out, "draw\t{}\t{}", i + 1, tables.sample(&mut rng))?;
    }

    let observed = checks::fopp_histogram(f, t, n, a.seed)?;
    let mut rows: Vec<(Vec<usize>, u64)> = match enumerate_compositions(f, t, Constraint::NonDecreasing, LIST_ALL_CAP) {
        Ok(all) => {
            let mut counts = observed.into_iter().peekable();
            all.compositions
                .into_iter()
                .map(|c| {
                    let k = match counts.peek() {
                        Some((seen, k)) if *seen == c => {
                            let k = *k;
                            counts.next();
                            k
                        }
                        _ => 0,
                    };
                    (c, k)
                })
                .collect()
        }
        Err(_) => observed,
    };
    rows.sort();
    writeln!(out, "composition\tcount\tempirical\texpected\tlo_3sigma\thi_3sigma\twithin")?;
    let mut outside = 0;
    for (c, k) in &rows {
        let comp = TimestepComposition::new(c.clone(), t)?;
        let p = tables.log_probability(&comp)?.exp();
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        let (lo, hi) = ((n as f64 * p - 3.0 * sd).max(0.0), n as f64 * p + 3.0 * sd);
        let ok = (lo..=hi).contains(&(*k as f64));
        outside += usize::from(!ok);
        writeln!(
            out,
            "{comp}\t{k}\t{:.6}\t{p:.6}\t{lo:.1}\t{hi:.1}\t{}",
            *k as f64 / n as f64,
            if ok { "yes" } else { "no" }
        )?;
    }
    writeln!(out, "# {} compositions listed, {outside} outside 3 sigma", rows.len())?;
    Ok(())
}
