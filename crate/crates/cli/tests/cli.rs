use std::path::Path;
use std::process::{Command, Output};

use supertonic::audio::{read_wav, write_wav, AudioWaveform, WavFormat};
use supertonic::config::ModelConfig;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supertonic"))
        .args(args)
        .env("SUPERTONIC_CHECKPOINT_DIR", dir.join("ckpt"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn profile_reports_paper_counts_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&run(&["profile"], dir.path()));
    assert!(out.contains("\"preset\": \"paper\""), "{out}");
    assert!(out.contains("\"all\": 44436473"), "{out}");
    assert!(out.contains("\"k_e\": 1"));
}

#[test]
fn bench_expansion_prints_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&run(&["bench-expansion", "--batches", "16,32", "--k-e", "1,2,4"], dir.path()));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "batch,k_e,gmacs,gflops,activation_gib");
    assert_eq!(lines.len(), 7);
    let gmacs = |l: &str| l.split(',').nth(2).unwrap().parse::<f64>().unwrap();
    assert!(gmacs(lines[1]) < gmacs(lines[2]) && gmacs(lines[2]) < gmacs(lines[3]));
}

#[test]
fn config_file_selects_preset_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("toy.toml");
    std::fs::write(&good, "preset = \"toy\"\n[flow_train]\nk_e = 2\n").unwrap();
    let out = stdout(&run(&["--config", good.to_str().unwrap(), "profile", "--chars", "20"], dir.path()));
    assert!(out.contains("\"preset\": \"toy\""));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "preset = \"toy\"\n[ttl]\nbogus = 1\n").unwrap();
    let o = run(&["--config", bad.to_str().unwrap(), "profile"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn synthesize_without_checkpoints_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["synthesize", "--text", "hi", "--ref", "missing.wav", "--out", "x.wav"],
        dir.path(),
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing checkpoint"));
}

/// Every stage with a handful of steps, then synthesis from the results.
#[test]
fn train_all_stages_then_synthesize() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sr = ModelConfig::toy().mel.sample_rate;
    let clips = [(0.8, 220.0, "a short line"), (1.0, 330.0, "another line"), (0.9, 275.0, "third one")];
    let mut manifest = String::new();
    for (i, (secs, f, text)) in clips.iter().enumerate() {
        let name = format!("c{i}.wav");
        let w = AudioWaveform::sine(*f, 0.3, (secs * sr as f64) as usize, sr);
        write_wav(d.join(&name), &w, WavFormat::Pcm16).unwrap();
        manifest.push_str(&format!("{}\t{text}\n", d.join(&name).display()));
    }
    std::fs::write(d.join("train.tsv"), manifest).unwrap();
    let cfg = d.join("cfg.toml");
    std::fs::write(
        &cfg,
        "preset = \"toy\"\n[ae_train]\nsteps = 2\n[flow_train]\nsteps = 3\nbatch_size = 2\n\
         [duration_train]\nsteps = 3\nbatch_size = 2\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let manifest = d.join("train.tsv");
    let manifest = manifest.to_str().unwrap();
    let metrics = d.join("ae.csv");

    stdout(&run(
        &["--config", cfg, "train-autoencoder", "--manifest", manifest, "--metrics", metrics.to_str().unwrap()],
        d,
    ));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 3);
    stdout(&run(&["train-ttl", "--manifest", manifest], d));
    stdout(&run(&["train-duration", "--manifest", manifest], d));
    assert!(d.join("ckpt/cache").is_dir());

    let out = d.join("out.wav");
    let args = [
        "synthesize", "--text", "hello", "--ref", &format!("{}", d.join("c1.wav").display()),
        "--out", out.to_str().unwrap(), "--nfe", "4", "--cfg", "2", "--seed", "7", "--frames", "5",
    ];
    stdout(&run(&args, d));
    let first = read_wav(&out).unwrap();
    let toy = ModelConfig::toy();
    assert_eq!(first.len(), 5 * toy.ttl.k_c * toy.mel.hop_size);
    stdout(&run(&args, d));
    assert_eq!(read_wav(&out).unwrap().samples, first.samples);

    let other = d.join("other.toml");
    std::fs::write(&other, "preset = \"toy\"\n[ae_train]\nsteps = 1\n").unwrap();
    let o = run(&["--config", other.to_str().unwrap(), "train-autoencoder", "--manifest", manifest], d);
    assert!(!o.status.success());
}
