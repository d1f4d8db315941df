use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tfrestore_core::degrade::DegradeConfig;
use tfrestore_core::sfi_stft::Waveform;
use tfrestore_core::wav::{read_wav, write_wav, WavFormat};

const TINY_STREAMING: &str = r#"
[train]
steps = 0

[train.model]
c_e = 8
b_e = 1
c_d = 8
b_d = 1
heads = 2
f_proj = 16
mode = "streaming"
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfrestore"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tone(seconds: f64, rate: u32, seed: u64) -> Waveform {
    let n = (seconds * rate as f64) as usize;
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let samples = (0..n)
        .map(|i| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let noise = ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.02;
            let t = i as f64 / rate as f64;
            0.3 * (2.0 * std::f64::consts::PI * 220.0 * t).sin() + 0.1 * (2.0 * std::f64::consts::PI * 660.0 * t).sin() + noise
        })
        .collect();
    Waveform::new(samples, rate)
}

fn write_clean_dir(dir: &Path, rate: u32, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        write_wav(dir.join(format!("utt{i}.wav")), &tone(0.5, rate, i as u64), WavFormat::Float32).unwrap();
    }
}

/// Runs `train` for zero steps and returns the initial generator checkpoint.
fn initial_checkpoint(root: &Path, config_toml: &str) -> (PathBuf, PathBuf) {
    let cfg = root.join("model.toml");
    fs::write(&cfg, config_toml).unwrap();
    let out = root.join("run");
    let o = run(&["train", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (out.join("checkpoints/step_00000000/generator.ckpt"), cfg)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_every_subcommand_and_flag() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in ["simulate", "train", "restore", "stream", "eval", "inspect", "--seed", "--jobs"] {
        assert!(text.contains(cmd), "missing {cmd} in help");
    }
    let o = run(&["simulate", "--help"]);
    for flag in ["--clean-dir", "--rir-dir", "--noise-dir", "--out-dir", "--config", "--count"] {
        assert!(stdout(&o).contains(flag), "missing {flag}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["restore"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["inspect"]).status.code(), Some(2));
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatch_size = 0\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out-dir", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("batch_size"));

    fs::write(&cfg, "[train]\nno_such_key = 1\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out-dir", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_full_preset_is_near_reference_size() {
    let o = run(&["inspect", "--preset", "full-offline", "--depth", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let total: f64 = text
        .lines()
        .find(|l| l.starts_with("total"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert!((total / 30.1e6 - 1.0).abs() <= 0.2, "{total}");
    for module in ["encoder", "decoder", "freq_proj"] {
        assert!(text.lines().any(|l| l.starts_with(module)), "no {module} row");
    }
    assert!(text.contains("reference offline size 30.1M"));
}

#[test]
fn inspect_reads_checkpoints_and_configs() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, cfg) = initial_checkpoint(dir.path(), TINY_STREAMING);
    let a = stdout(&run(&["inspect", "--ckpt", s(&ckpt), "--depth", "4"]));
    let b = stdout(&run(&["inspect", "--config", s(&cfg), "--depth", "4"]));
    assert_eq!(a, b);
    assert!(a.contains("mamba"));
}

#[test]
fn train_with_zero_steps_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = initial_checkpoint(dir.path(), "[train]\nsteps = 0\n");
    let step0 = ckpt.parent().unwrap();
    for f in ["generator.ckpt", "discriminator.ckpt", "optimizer.ckpt"] {
        assert!(step0.join(f).is_file(), "{f}");
    }
}

#[test]
fn train_runs_from_clean_dir_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_dir(&clean, 16000, 2);
    let cfg = dir.path().join("cfg.toml");
    let body = format!(
        "[train]\nsteps = 2\ncheckpoint_every = 1\nwarmup_steps = 0\nsegment_seconds = 0.2\nbatch_size = 1\ntarget_rates = [16000]\n\n\
         [train.model]\nc_e = 8\nb_e = 1\nc_d = 8\nb_d = 1\nheads = 2\nf_proj = 16\n\n\
         [degrade]\ndownsample_rates = [[8000, 1.0]]\ntarget_rates = [16000]\n\n[data]\nclean_dir = \"{}\"\n",
        clean.display()
    );
    fs::write(&cfg, body).unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--seed",
        "3",
        "--steps",
        "3",
        "--resume",
        s(&out.join("checkpoints/step_00000002")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(resumed.lines().count(), 4);
    assert!(resumed.starts_with(&log));
}

#[test]
fn exploding_training_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_dir(&clean, 16000, 1);
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        "[train]\nsteps = 4\nlr = 1e300\nwarmup_steps = 0\ngrad_clip = 1e300\nsegment_seconds = 0.2\nbatch_size = 1\n\
         target_rates = [16000]\n\n[train.model]\nc_e = 8\nb_e = 1\nc_d = 8\nb_d = 1\nheads = 2\nf_proj = 16\n\n\
         [degrade]\ndownsample_rates = [[16000, 1.0]]\ntarget_rates = [16000]\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--clean-dir", s(&clean)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn simulate_passthrough_gives_identical_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_dir(&clean, 16000, 3);
    let cfg = dir.path().join("pass.json");
    fs::write(&cfg, serde_json::json!({ "degrade": DegradeConfig::passthrough(16000) }).to_string()).unwrap();
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--clean-dir", s(&clean), "--out-dir", s(&out), "--config", s(&cfg), "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    for i in 0..3 {
        let a = read_wav(out.join(format!("input/utt{i}.wav"))).unwrap();
        let b = read_wav(out.join(format!("target/utt{i}.wav"))).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn simulate_is_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_dir(&clean, 16000, 2);
    let trees: Vec<_> = [("a", "1"), ("b", "4")]
        .iter()
        .map(|(name, jobs)| {
            let out = dir.path().join(name);
            let o = run(&[
                "simulate", "--clean-dir", s(&clean), "--out-dir", s(&out), "--seed", "9", "--count", "3", "--jobs", jobs,
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            tree(&out)
        })
        .collect();
    assert_eq!(trees[0].len(), 7);
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn simulate_missing_noise_dir_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    write_clean_dir(&clean, 16000, 1);
    let o = run(&[
        "simulate",
        "--clean-dir",
        s(&clean),
        "--noise-dir",
        s(&dir.path().join("absent")),
        "--out-dir",
        s(&dir.path().join("sim")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("noise directory"));
}

#[test]
fn restore_changes_rate_and_keeps_duration() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = initial_checkpoint(dir.path(), "[train]\nsteps = 0\n");
    let input = dir.path().join("in.wav");
    let x = tone(0.5, 8000, 1);
    write_wav(&input, &x, WavFormat::Float32).unwrap();
    for (rate, expected) in [(16000u32, 8000usize), (8000, 4000)] {
        let out = dir.path().join(format!("out{rate}.wav"));
        let o = run(&["restore", "--in", s(&input), "--out", s(&out), "--rate", &rate.to_string(), "--ckpt", s(&ckpt)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let y = read_wav(&out).unwrap();
        assert_eq!(y.sample_rate, rate);
        let hop = rate as usize / 50;
        assert!(y.len().abs_diff(expected) <= hop, "{} vs {expected}", y.len());
    }
}

#[test]
fn restore_rejects_off_grid_rates() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = initial_checkpoint(dir.path(), "[train]\nsteps = 0\n");
    let input = dir.path().join("in.wav");
    write_wav(&input, &tone(0.2, 11025, 1), WavFormat::Float32).unwrap();
    let o = run(&["restore", "--in", s(&input), "--out", s(&dir.path().join("o.wav")), "--rate", "16000", "--ckpt", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("11025"));
}

#[test]
fn restore_reports_config_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = initial_checkpoint(dir.path(), "[train]\nsteps = 0\n");
    let other = dir.path().join("other.toml");
    fs::write(&other, "[train.model]\nc_e = 16\nb_e = 1\nc_d = 8\nb_d = 1\nheads = 2\nf_proj = 16\n").unwrap();
    let input = dir.path().join("in.wav");
    write_wav(&input, &tone(0.2, 16000, 1), WavFormat::Float32).unwrap();
    let o = run(&[
        "restore",
        "--in",
        s(&input),
        "--out",
        s(&dir.path().join("o.wav")),
        "--rate",
        "16000",
        "--ckpt",
        s(&ckpt),
        "--config",
        s(&other),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("does not match") && err.contains("shape"), "{err}");
}

#[test]
fn streaming_restore_matches_offline_reference_and_reports_timing() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = initial_checkpoint(dir.path(), TINY_STREAMING);
    let input = dir.path().join("in.wav");
    write_wav(&input, &tone(0.5, 8000, 2), WavFormat::Float32).unwrap();
    let whole = dir.path().join("whole.wav");
    let framed = dir.path().join("framed.wav");
    let timings = dir.path().join("t.csv");
    let common = ["--in", s(&input), "--rate", "16000", "--ckpt", s(&ckpt)];

    let o = bin().arg("restore").args(common).args(["--out", s(&whole)]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bin().arg("restore").args(common).args(["--out", s(&framed), "--streaming"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("RTF"));

    let (a, b) = (read_wav(&whole).unwrap(), read_wav(&framed).unwrap());
    assert_eq!(a.len(), b.len());
    let err = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "{err}");

    let o = bin()
        .arg("stream")
        .args(common)
        .args(["--out", s(&dir.path().join("s.wav")), "--timings", s(&timings)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("latency 80 ms"), "{}", stdout(&o));
    let rows = fs::read_to_string(&timings).unwrap();
    assert_eq!(rows.lines().count(), 1 + 25);
    assert!(rows.lines().nth(1).unwrap().starts_with("0,0,"));
}

#[test]
fn eval_of_identical_dirs_is_zero_distance() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("ref");
    write_clean_dir(&clean, 16000, 3);
    let out = dir.path().join("report.csv");
    let o = run(&["eval", "--ref-dir", s(&clean), "--est-dir", s(&clean), "--out", s(&out), "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(&out).unwrap();
    let mut n = 0;
    for row in r.records() {
        let row = row.unwrap();
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.0, "lsd");
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.0, "mcd");
        n += 1;
    }
    assert_eq!(n, 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["count"], 3);
    assert!(summary["settings"]["sdr_cap_db"].is_number());
}

#[test]
fn eval_missing_estimate_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("ref");
    write_clean_dir(&clean, 16000, 2);
    let est = dir.path().join("est");
    write_clean_dir(&est, 16000, 1);
    let o = run(&["eval", "--ref-dir", s(&clean), "--est-dir", s(&est), "--out", s(&dir.path().join("r.csv"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("utt1"));
}
