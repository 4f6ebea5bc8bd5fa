use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ardiff::LatentVideo;

const SMALL: &str = r#"
[schedule]
timesteps = 20
[dataset]
n_sequences = 16
frames = 4
[model]
d_model = 8
n_heads = 2
mlp_hidden = 8
[train]
steps = 12
batch_size = 4
learning_rate = 0.01
[sample]
grid_steps = 10
"#;

fn ardiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ardiff"))
        .args(args)
        .env("ARDIFF_OUTPUT_DIR", dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn count_examples() {
    let dir = tempfile::tempdir().unwrap();
    let out = ardiff(dir.path(), &["count", "--frames", "3", "--timesteps", "3"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("non-decreasing\t10\t"));
    assert!(text.contains("equal\t3\t"));
    assert!(text.contains("independent\t27\t"));
    let text = stdout(&ardiff(dir.path(), &["count", "--frames", "1", "--timesteps", "5"]));
    assert!(text.contains("non-decreasing\t5\t"));
    let text = stdout(&ardiff(dir.path(), &["count", "--frames", "16", "--timesteps", "1000"]));
    assert!(text.contains("53855312085464377672249158113395375\t≈5.4e34"));
}

#[test]
fn count_table_cache_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let tables = dir.path().join("t.bin");
    let args = ["count", "--frames", "16", "--timesteps", "1000", "--tables", tables.to_str().unwrap()];
    let first = ardiff(dir.path(), &args);
    assert!(tables.exists());
    let second = ardiff(dir.path(), &args);
    assert_eq!(first.stdout, second.stdout);
    let wrong = ardiff(dir.path(), &["count", "--frames", "4", "--timesteps", "1000", "--tables", tables.to_str().unwrap()]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ardiff(dir.path(), &["count", "--frames", "0", "--timesteps", "3"]).status.code(), Some(2));
    assert_eq!(ardiff(dir.path(), &["plan", "--frames", "2", "--steps", "5", "--s", "-1"]).status.code(), Some(2));
    assert_eq!(ardiff(dir.path(), &["verify", "nonsense"]).status.code(), Some(2));
    assert_eq!(ardiff(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn plan_step_counts_and_export() {
    let dir = tempfile::tempdir().unwrap();
    for (s, want) in [("0", 50), ("5", 125), ("50", 800)] {
        let out = ardiff(dir.path(), &["plan", "--frames", "16", "--steps", "50", "--s", s]);
        assert!(out.status.success());
        assert!(stdout(&out).contains(&format!("steps\t{want}\n")));
        let file = dir.path().join(format!("plan_f16_n50_s{s}.jsonl"));
        let text = fs::read_to_string(&file).unwrap();
        assert_eq!(text.lines().count(), want + 1);
        let again = ardiff(dir.path(), &["plan", "--frames", "16", "--steps", "50", "--s", s]);
        assert!(again.status.success());
        assert_eq!(fs::read(&file).unwrap(), text.as_bytes());
    }
}

#[test]
fn verify_scheduler_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ardiff(dir.path(), &["verify", "scheduler", "--report", "report.txt"]);
    assert_eq!(out.status.code(), Some(0));
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.lines().filter(|l| !l.starts_with('#')).all(|l| l.ends_with("\tPASS")));
    assert!(report.ends_with("0 failed\n"));
}

#[test]
fn sample_composition_matches_mixture_law() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sample-composition", "--frames", "2", "--timesteps", "2", "--n", "10000", "--seed", "7"];
    let out = ardiff(dir.path(), &args);
    assert!(out.status.success());
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with('<')).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with("\tyes")), "{text}");
    assert!(rows[0].contains("\t0.375000\t") && rows[1].contains("\t0.250000\t"));
    assert_eq!(ardiff(dir.path(), &args).stdout, out.stdout);
}

#[test]
fn train_then_generate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ardiff(dir.path(), &["--config", &cfg, "train", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = fs::read(dir.path().join("checkpoint.bin")).unwrap();
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.starts_with("step,loss,grad_norm,lr\n"));

    for s in ["0", "5"] {
        let out = ardiff(dir.path(), &["--config", &cfg, "generate", "--s", s, "--seed", "1"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |name: &str| {
        let bytes = fs::read(dir.path().join(name)).unwrap();
        let (z, scale) = LatentVideo::read_from(&bytes[..]).unwrap();
        (bytes, z, scale)
    };
    let (b0, z0, scale) = read("sample_s0.bin");
    let (b5, z5, _) = read("sample_s5.bin");
    assert_eq!(scale, 0.5);
    assert_eq!(z0.shape(), (4, 1, 2));
    assert_ne!(b0, b5);
    assert!(z0.data().iter().chain(z5.data()).all(|v| v.is_finite()));

    // byte-identical reruns of both commands
    let out = ardiff(dir.path(), &["--config", &cfg, "train", "--seed", "3"]);
    assert!(out.status.success());
    assert_eq!(fs::read(dir.path().join("checkpoint.bin")).unwrap(), ckpt);
    assert_eq!(fs::read_to_string(dir.path().join("loss.csv")).unwrap(), csv);
    let out = ardiff(dir.path(), &["--config", &cfg, "generate", "--s", "0", "--seed", "1", "--csv", "z.csv"]);
    assert!(out.status.success());
    assert_eq!(fs::read(dir.path().join("sample_s0.bin")).unwrap(), b0);
    let dump = fs::read_to_string(dir.path().join("z.csv")).unwrap();
    assert_eq!(dump.lines().count(), 1 + 8);

    for mode in ["recorrupt_stochastic", "posterior"] {
        let steps = if mode == "posterior" { "20" } else { "10" };
        let run = || {
            let out = ardiff(
                dir.path(),
                &["--config", &cfg, "generate", "--mode", mode, "--steps", steps, "--s", "2", "--output", "m.bin"],
            );
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            fs::read(dir.path().join("m.bin")).unwrap()
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ardiff(dir.path(), &["--config", &cfg, "train", "--steps", "3", "--loss-csv", "short.csv"]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("short.csv")).unwrap().lines().count(), 4);
}

#[test]
fn output_dir_precedence() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let out = ardiff(env_dir.path(), &["plan", "--frames", "2", "--steps", "3"]);
    assert!(out.status.success());
    assert!(env_dir.path().join("plan_f2_n3_s0.jsonl").exists());
    let out = ardiff(
        env_dir.path(),
        &["plan", "--frames", "2", "--steps", "3", "--output-dir", flag_dir.path().to_str().unwrap()],
    );
    assert!(out.status.success());
    assert!(flag_dir.path().join("plan_f2_n3_s0.jsonl").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nsteps = 4\nlearning_rat = 0.1\n").unwrap();
    let out = ardiff(dir.path(), &["--config", bad.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("learning_rat"), "{err}");
    let missing = ardiff(dir.path(), &["--config", "/nonexistent/x.toml", "count", "--frames", "1", "--timesteps", "1"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn checkpoint_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(ardiff(dir.path(), &["--config", &cfg, "train", "--steps", "1"]).status.success());
    let other = dir.path().join("other.toml");
    fs::write(&other, SMALL.replace("frames = 4", "frames = 5")).unwrap();
    let out = ardiff(dir.path(), &["--config", other.to_str().unwrap(), "generate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frames: config 5, checkpoint 4"));
    let out = ardiff(dir.path(), &["--config", &cfg, "generate", "--checkpoint", "missing.bin"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dataset_cache_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cached.toml");
    fs::write(&cfg, format!("dataset_cache = \"data.bin\"\n{SMALL}")).unwrap();
    let cfg = cfg.to_str().unwrap();
    assert!(ardiff(dir.path(), &["--config", cfg, "train", "--steps", "2"]).status.success());
    let cache = fs::read(dir.path().join("data.bin")).unwrap();
    let (stacked, _) = LatentVideo::read_from(&cache[..]).unwrap();
    assert_eq!(stacked.shape(), (16 * 4, 1, 2));
    let first = fs::read(dir.path().join("checkpoint.bin")).unwrap();
    assert!(ardiff(dir.path(), &["--config", cfg, "train", "--steps", "2"]).status.success());
    assert_eq!(fs::read(dir.path().join("checkpoint.bin")).unwrap(), first);
}
