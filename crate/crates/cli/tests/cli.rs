use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
chunk_len = 64
train = 6
val = 2
test = 4

[network]
levels = 2
channels = [4, 8]
kernel = 3
cond_dim = 8

[det]
steps = 3
batch = 2

[diff]
steps = 3
batch = 2

[distill]
steps = 2
batch = 2

[eval]
sigma_grid = [0.01, 0.1, 1.0]
steps_grid = [1, 2, 3, 4, 5]
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sepkit"))
            .args(args)
            .current_dir(self.dir.path())
            .env("SEPKIT_RUNS", self.path("runs"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn train(&self, stage: &str) -> PathBuf {
        PathBuf::from(self.ok(&["train", stage, "--config", "tiny.toml"]).trim())
    }
}

fn digest(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn gen_data_counts_and_idempotence() {
    let env = Env::new();
    env.ok(&["gen-data", "--seed", "0", "--train", "512", "--test", "64", "--out", "d1"]);
    let lines = |dir: &str| -> usize {
        ["train", "val", "test"]
            .iter()
            .map(|s| fs::read_to_string(env.path(dir).join(format!("{s}.tsv"))).unwrap().lines().count())
            .sum()
    };
    assert_eq!(lines("d1"), 576);
    env.ok(&["gen-data", "--seed", "0", "--train", "512", "--test", "64", "--out", "d2"]);
    for s in ["train", "val", "test"] {
        let f = format!("{s}.tsv");
        assert_eq!(digest(&env.path("d1").join(&f)), digest(&env.path("d2").join(&f)));
    }

    env.ok(&["gen-data", "--config", "tiny.toml", "--train", "2", "--test", "1", "--export-wav", "--pcm16", "--out", "w"]);
    let count = |split: &str| fs::read_dir(env.path("w/wav").join(split)).unwrap().count();
    assert_eq!(count("train"), 2 * 5);
    assert_eq!(count("test"), 5);
}

#[test]
fn training_needs_prerequisites() {
    let env = Env::new();
    for stage in ["diff", "distill"] {
        let out = env.run(&["train", stage, "--config", "tiny.toml"]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("missing det checkpoint"));
    }
    env.train("det");
    let out = env.run(&["train", "distill", "--config", "tiny.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing diff checkpoint"));
}

#[test]
fn bad_config_is_a_user_error() {
    let env = Env::new();
    fs::write(env.path("bad.toml"), "[data]\nbogus = 1\n").unwrap();
    assert_eq!(env.run(&["train", "det", "--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(env.run(&["train", "det", "--config", "missing.toml"]).status.code(), Some(2));
    assert_eq!(env.run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn det_training_is_reproducible_and_append_only() {
    let env = Env::new();
    let a = env.train("det");
    let b = env.train("det");
    assert_ne!(a, b);
    assert!(a.starts_with(env.path("runs")));
    assert!(a.parent().unwrap().file_name().unwrap().to_string_lossy().starts_with("det-"));
    assert_eq!(digest(&a), digest(&b));
    let run = a.parent().unwrap();
    assert!(run.join("config.toml").exists());
    let log = fs::read_to_string(run.join("log.txt")).unwrap();
    let last = log.lines().last().unwrap();
    assert_eq!(last.split(' ').count(), 3);
    assert!(last.starts_with("3 "));

    let c = PathBuf::from(env.ok(&["train", "det", "--config", "tiny.toml", "--seed", "5"]).trim());
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let env = Env::new();
    let full = env.train("det");
    let half = env.ok(&["train", "det", "--config", "tiny.toml", "--steps", "1"]);
    let resumed = env.ok(&["train", "det", "--config", "tiny.toml", "--resume", half.trim()]);
    assert_eq!(digest(&full), digest(Path::new(resumed.trim())));
}

#[test]
fn full_pipeline_commands() {
    let env = Env::new();
    env.train("det");
    env.train("diff");
    env.train("distill");

    let out = env.ok(&["separate", "--config", "tiny.toml", "--example", "7", "--sampler", "det", "--out", "sep"]);
    assert!(out.contains("rtf="));
    let stems: Vec<Vec<f64>> = (0..4)
        .map(|s| {
            let path = env.path("sep").join(format!("source{s}.wav"));
            let r = hound::WavReader::open(path).unwrap();
            r.into_samples::<f32>().map(|v| v.unwrap() as f64).collect()
        })
        .collect();
    let sum: Vec<f64> = (0..64).map(|i| stems.iter().map(|s| s[i]).sum()).collect();
    assert!(sum.iter().all(|v| v.is_finite()));

    for args in [
        ["--sampler", "edm", "--steps", "5", "--correction", "2", "--sigma-max", "0.01"].as_slice(),
        ["--sampler", "cd-multistep", "--steps", "4", "--sigma-max", "0.2495"].as_slice(),
        ["--sampler", "cd-onestep", "--sigma-max", "0.01244"].as_slice(),
    ] {
        let mut full = vec!["separate", "--config", "tiny.toml", "--example", "7", "--out", "sep2"];
        full.extend_from_slice(args);
        env.ok(&full);
    }

    // Arbitrary-length WAV input is padded and trimmed.
    let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
    let mut w = hound::WavWriter::create(env.path("in.wav"), spec).unwrap();
    for i in 0..100 {
        w.write_sample((i as f32 * 0.1).sin() * 0.3).unwrap();
    }
    w.finalize().unwrap();
    env.ok(&["separate", "--config", "tiny.toml", "--input", "in.wav", "--sampler", "det", "--out", "sep3"]);
    let r = hound::WavReader::open(env.path("sep3/source0.wav")).unwrap();
    assert_eq!(r.len(), 100);

    fs::write(env.path("junk.wav"), b"not a wav").unwrap();
    let out = env.run(&["separate", "--config", "tiny.toml", "--input", "junk.wav", "--sampler", "det"]);
    assert_eq!(out.status.code(), Some(2));

    let report = env.ok(&["evaluate", "--config", "tiny.toml", "--stub", "mixture", "--out", "ev"]);
    assert!(report.contains("avg_si_sdri=0.000000"), "{report}");
    assert!(env.path("ev/report.csv").exists());
    env.ok(&["evaluate", "--config", "tiny.toml", "--sampler", "cd-onestep"]);

    env.ok(&["sweep", "--config", "tiny.toml", "--model", "cd", "--out", "sw1"]);
    env.ok(&["sweep", "--config", "tiny.toml", "--model", "cd", "--out", "sw2"]);
    let csvs: Vec<_> = fs::read_dir(env.path("sw1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_eq!(csvs.len(), 5);
    for name in &csvs {
        let a = fs::read_to_string(env.path("sw1").join(name)).unwrap();
        assert_eq!(a.lines().next(), Some("sigma_max,steps,si_sdri_avg"));
        assert_eq!(a.lines().count(), 4);
        assert_eq!(a, fs::read_to_string(env.path("sw2").join(name)).unwrap());
    }
    env.ok(&["sweep", "--config", "tiny.toml", "--model", "edm", "--out", "sw3"]);
}

#[test]
fn wrong_stage_checkpoint_is_rejected() {
    let env = Env::new();
    let det = env.train("det");
    let out = env.run(&["train", "distill", "--config", "tiny.toml", "--diff", det.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected diff"));
}
