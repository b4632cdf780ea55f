use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sepkit::audio::{read_wav, write_wav, WavEncoding};
use sepkit::config::{RunConfig, SamplerKind, SamplerSection};
use sepkit::data::{generate_example, write_manifest, ManifestEntry, Split, NUM_SOURCES};
use sepkit::metrics::{evaluate_model, sweep_csv, EvalReport};
use sepkit::network::{checkpoint, Parameters};
use sepkit::pipeline::{
    checkpoint_stage, evaluate_sampler, generate_examples, model_params, sweep, test_examples,
    DetCache, LogEvent, Separator, Stage, SweepModel, TrainSet, Trainer,
};
use sepkit::Error;

#[derive(Parser)]
#[command(name = "sepkit", version, about = "Waveform source extraction with diffusion and consistency refiners")]
struct Cli {
    /// Worker threads for data generation and batch gradients.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write dataset manifests and optional WAV exports.
    GenData(GenDataArgs),
    /// Train one stage; writes a run directory with final.ckpt.
    Train(TrainArgs),
    /// Extract every stem of one mixture.
    Separate(SeparateArgs),
    /// Score one sampler on the test split.
    Evaluate(EvaluateArgs),
    /// Evaluate a grid of starting noise levels and step counts.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    export_wav: bool,
    /// Export 16-bit PCM instead of 32-bit float.
    #[arg(long)]
    pcm16: bool,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Det,
    Diff,
    Distill,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Det => Stage::Det,
            StageArg::Diff => Stage::Diff,
            StageArg::Distill => Stage::Distill,
        }
    }
}

#[derive(Args)]
struct CheckpointArgs {
    /// Extractor checkpoint (default: latest det run).
    #[arg(long)]
    det: Option<PathBuf>,
    /// Diffusion checkpoint (default: latest diff run).
    #[arg(long)]
    diff: Option<PathBuf>,
    /// Consistency checkpoint (default: latest distill run).
    #[arg(long)]
    cd: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    stage: StageArg,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many optimizer steps (overrides epochs).
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    ckpts: CheckpointArgs,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, value_parser = ["det", "edm", "cd-onestep", "cd-multistep"])]
    sampler: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    correction: Option<usize>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    s_churn: Option<f64>,
}

impl SamplerArgs {
    fn apply(&self, base: SamplerSection) -> SamplerSection {
        let mut s = base;
        if let Some(k) = &self.sampler {
            s.kind = match k.as_str() {
                "det" => SamplerKind::Det,
                "edm" => SamplerKind::Edm,
                "cd-onestep" => SamplerKind::CdOnestep,
                _ => SamplerKind::CdMultistep,
            };
        }
        s.steps = self.steps.unwrap_or(s.steps);
        s.corrections = self.correction.unwrap_or(s.corrections);
        s.sigma_max = self.sigma_max.unwrap_or(s.sigma_max);
        s.s_churn = self.s_churn.unwrap_or(s.s_churn);
        s
    }
}

#[derive(Args)]
struct SeparateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Mono WAV mixture.
    #[arg(long, conflicts_with = "example", required_unless_present = "example")]
    input: Option<PathBuf>,
    /// Index of a generated example instead of a WAV file.
    #[arg(long)]
    example: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    ckpts: CheckpointArgs,
    #[arg(long)]
    pcm16: bool,
    #[arg(long, default_value = "separated")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stub {
    /// Returns the mixture unchanged.
    Mixture,
    /// Returns the reference stem.
    Oracle,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    ckpts: CheckpointArgs,
    /// Score a reference extractor instead of a trained model.
    #[arg(long, value_enum)]
    stub: Option<Stub>,
    /// Directory for report.txt and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Edm,
    Cd,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    model: ModelArg,
    #[command(flatten)]
    ckpts: CheckpointArgs,
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

/// An error caused by the invocation rather than by the program.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UserError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Range(_)
            | Error::Domain(_)
            | Error::Checkpoint(_)
            | Error::Audio(_)
            | Error::EmptyEvaluation(_)
            | Error::Io(_),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let workers = cli.workers.max(1);
    let res = match cli.cmd {
        Command::GenData(a) => gen_data(a, workers),
        Command::Train(a) => train(a, workers),
        Command::Separate(a) => separate(a),
        Command::Evaluate(a) => evaluate(a, workers),
        Command::Sweep(a) => run_sweep(a, workers),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn runs_root() -> PathBuf {
    std::env::var_os("SEPKIT_RUNS").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Creates `runs/<stage>-<timestamp>`, adding a suffix rather than reusing a directory.
fn new_run_dir(stage: Stage) -> anyhow::Result<PathBuf> {
    let root = runs_root();
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for n in 0.. {
        let name = if n == 0 {
            format!("{}-{stamp}", stage.name())
        } else {
            format!("{}-{stamp}-{n}", stage.name())
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

/// Newest `final.ckpt` among `runs/<stage>-*` directories.
fn latest_checkpoint(stage: Stage) -> Option<PathBuf> {
    let prefix = format!("{}-", stage.name());
    let mut found: Vec<(std::time::SystemTime, PathBuf)> = fs::read_dir(runs_root())
        .ok()?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(&prefix))
        .map(|e| e.path().join("final.ckpt"))
        .filter_map(|p| Some((fs::metadata(&p).ok()?.modified().ok()?, p)))
        .collect();
    found.sort();
    found.pop().map(|(_, p)| p)
}

/// Model weights of a `stage` checkpoint, from `path` or the newest run.
fn stage_weights(stage: Stage, path: Option<&Path>) -> anyhow::Result<Parameters> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(stage).ok_or_else(|| {
            user(format!(
                "missing {} checkpoint: run `sepkit train {}` first or pass --{}",
                stage.name(),
                stage.name(),
                flag_for(stage)
            ))
        })?,
    };
    let ckpt = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let got = checkpoint_stage(&ckpt)?;
    if got != stage {
        return Err(user(format!(
            "{} is a {} checkpoint, expected {}",
            path.display(),
            got.name(),
            stage.name()
        )));
    }
    info!("{} weights: {}", stage.name(), path.display());
    Ok(model_params(&ckpt)?)
}

fn flag_for(stage: Stage) -> &'static str {
    match stage {
        Stage::Det => "det",
        Stage::Diff => "diff",
        Stage::Distill => "cd",
    }
}

fn gen_data(a: GenDataArgs, workers: usize) -> anyhow::Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    cfg.data.train = a.train.unwrap_or(cfg.data.train);
    cfg.data.val = a.val;
    cfg.data.test = a.test.unwrap_or(cfg.data.test);
    let data = &cfg.data;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let enc = if a.pcm16 { WavEncoding::Pcm16 } else { WavEncoding::Float32 };
    for split in [Split::Train, Split::Val, Split::Test] {
        let examples = generate_examples(data, data.indices(split), workers);
        let entries: Vec<ManifestEntry> = examples
            .iter()
            .map(|ex| ManifestEntry {
                idx: ex.idx,
                seed: data.seed,
                active: ex.active,
            })
            .collect();
        write_manifest(&a.out.join(format!("{}.tsv", split.name())), &entries)?;
        if a.export_wav {
            let dir = a.out.join("wav").join(split.name());
            fs::create_dir_all(&dir)?;
            for ex in &examples {
                write_wav(&dir.join(format!("{:06}_mix.wav", ex.idx)), ex.mix.data(), data.sample_rate, enc)?;
                for s in 0..NUM_SOURCES {
                    let path = dir.join(format!("{:06}_s{s}.wav", ex.idx));
                    write_wav(&path, ex.stem(s).data(), data.sample_rate, enc)?;
                }
            }
        }
        info!("{}: {} examples", split.name(), examples.len());
    }
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn train(a: TrainArgs, workers: usize) -> anyhow::Result<()> {
    let stage = Stage::from(a.stage);
    let mut cfg = a.config.load()?;
    let tc = match stage {
        Stage::Det => &mut cfg.det,
        Stage::Diff => &mut cfg.diff,
        Stage::Distill => &mut cfg.distill,
    };
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if a.steps.is_some() {
        tc.steps = a.steps;
    }
    let seed = tc.seed;
    let total = tc.total_steps(cfg.data.train) as u64;

    let det = match stage {
        Stage::Det => None,
        _ => Some(stage_weights(Stage::Det, a.ckpts.det.as_deref())?),
    };
    let teacher = match stage {
        Stage::Distill => Some(stage_weights(Stage::Diff, a.ckpts.diff.as_deref())?),
        _ => None,
    };
    let trainer = match &a.resume {
        Some(p) => {
            let ckpt = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if checkpoint_stage(&ckpt)? != stage {
                return Err(user(format!("{} is not a {} checkpoint", p.display(), stage.name())));
            }
            Trainer::resume(&cfg, &ckpt, det, teacher)?
        }
        None => match stage {
            Stage::Det => Trainer::det(&cfg, seed)?,
            Stage::Diff => Trainer::diff(&cfg, seed, det.expect("extractor"))?,
            Stage::Distill => {
                Trainer::distill(&cfg, seed, det.expect("extractor"), teacher.expect("teacher"))?
            }
        },
    };
    let mut trainer = trainer.with_workers(workers);

    let dir = new_run_dir(stage)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("log.txt"))?;
    info!("run directory {}", dir.display());
    let data = TrainSet::generate(&cfg.data, workers);
    info!(
        "{} training: {} examples, steps {}..{total}",
        stage.name(),
        data.train.len(),
        trainer.state.step
    );
    let start = Instant::now();
    trainer.run(&data, total, &mut |e: &LogEvent| {
        writeln!(log, "{} {:.6e} {:e}", e.step, e.loss, e.lr)?;
        match e.val {
            Some(v) => info!("step {} loss {:.4e} val {:.4e}", e.step, e.loss, v),
            None => info!("step {} loss {:.4e}", e.step, e.loss),
        }
        Ok(())
    })?;
    let path = dir.join("final.ckpt");
    checkpoint::save(&path, &trainer.checkpoint())?;
    info!("wrote {} in {:.1}s", path.display(), start.elapsed().as_secs_f64());
    println!("{}", path.display());
    Ok(())
}

fn build_separator(cfg: &RunConfig, ckpts: &CheckpointArgs, kind: SamplerKind) -> anyhow::Result<Separator> {
    let mut sep = Separator::new(cfg, stage_weights(Stage::Det, ckpts.det.as_deref())?)?;
    match kind {
        SamplerKind::Det => {}
        SamplerKind::Edm => {
            sep = sep.with_diffusion(stage_weights(Stage::Diff, ckpts.diff.as_deref())?)?;
        }
        SamplerKind::CdOnestep | SamplerKind::CdMultistep => {
            sep = sep.with_consistency(stage_weights(Stage::Distill, ckpts.cd.as_deref())?)?;
        }
    }
    Ok(sep)
}

fn separate(a: SeparateArgs) -> anyhow::Result<()> {
    let cfg = a.config.load()?;
    let settings = a.sampler.apply(cfg.sampler);
    let (mix, sr) = match (&a.input, a.example) {
        (Some(p), _) => read_wav(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(i)) => (
            generate_example(cfg.data.seed, i, &cfg.data).mix.into_data(),
            cfg.data.sample_rate,
        ),
        (None, None) => return Err(user("pass --input or --example")),
    };
    let sep = build_separator(&cfg, &a.ckpts, settings.kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(cfg.eval.seed));
    fs::create_dir_all(&a.out)?;
    let enc = if a.pcm16 { WavEncoding::Pcm16 } else { WavEncoding::Float32 };
    let mut seconds = 0.0;
    for s in 0..NUM_SOURCES {
        let start = Instant::now();
        let out = sep.extract_any(&mix, s, &settings, &mut rng)?;
        seconds += start.elapsed().as_secs_f64();
        write_wav(&a.out.join(format!("source{s}.wav")), &out, sr, enc)?;
    }
    let audio = mix.len() as f64 / sr as f64;
    println!("sampler={}", settings.kind.name());
    println!("wall_seconds={seconds:.6}");
    println!("rtf={:.6}", seconds / audio);
    Ok(())
}

fn emit_report(report: &EvalReport, out: Option<&Path>) -> anyhow::Result<()> {
    print!("{}", report.to_key_values());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), report.to_key_values())?;
        fs::write(
            dir.join("report.csv"),
            format!("{}\n{}\n", EvalReport::csv_header(), report.to_csv_row()),
        )?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs, workers: usize) -> anyhow::Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.eval.seed = s;
    }
    let test = test_examples(&cfg.data, workers);
    let (window, hop, sr) = (cfg.window(), cfg.hop(), cfg.data.sample_rate);
    let report = match a.stub {
        Some(Stub::Mixture) => evaluate_model(|mix, _| Ok(mix.clone()), &test, window, hop, sr)?,
        Some(Stub::Oracle) => {
            // The stub recovers each reference from the chunk position in the mixture.
            let lookup = |mix: &sepkit::Tensor, s: usize| -> Result<sepkit::Tensor, Error> {
                for ex in &test {
                    let stem = ex.stem(s);
                    for start in (0..=ex.mix.len().saturating_sub(window)).step_by(hop) {
                        if &ex.mix.data()[start..start + window] == mix.data() {
                            return Ok(sepkit::Tensor::row(stem.data()[start..start + window].to_vec()));
                        }
                    }
                }
                Err(Error::Contract("chunk not found in the test set".into()))
            };
            evaluate_model(lookup, &test, window, hop, sr)?
        }
        None => {
            let settings = a.sampler.apply(cfg.sampler);
            let sep = build_separator(&cfg, &a.ckpts, settings.kind)?;
            evaluate_sampler(&sep, &test, &settings, cfg.eval.seed, None)?
        }
    };
    emit_report(&report, a.out.as_deref())
}

fn run_sweep(a: SweepArgs, workers: usize) -> anyhow::Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.eval.seed = s;
    }
    let (model, kind) = match a.model {
        ModelArg::Edm => (SweepModel::Diffusion, SamplerKind::Edm),
        ModelArg::Cd => (SweepModel::Consistency, SamplerKind::CdOnestep),
    };
    let sep = build_separator(&cfg, &a.ckpts, kind)?;
    let test = test_examples(&cfg.data, workers);
    let cache = DetCache::build(&sep, &test, cfg.window(), cfg.hop())?;
    fs::create_dir_all(&a.out)?;

    let det_only = SamplerSection { kind: SamplerKind::Det, ..cfg.sampler };
    let baseline = evaluate_sampler(&sep, &test, &det_only, cfg.eval.seed, Some(&cache))?;
    fs::write(a.out.join("baseline.txt"), baseline.to_key_values())?;
    println!("baseline si_sdri_avg={:.4}", baseline.avg_si_sdri);

    for &steps in &cfg.eval.steps_grid {
        let rows = sweep(&sep, &test, model, &cfg.eval.sigma_grid, &[steps], cfg.eval.seed, Some(&cache))?;
        let path = a.out.join(format!("{}_steps{steps}.csv", model.name()));
        fs::write(&path, sweep_csv(&rows))?;
        let best = rows
            .iter()
            .max_by(|x, y| x.si_sdri_avg.total_cmp(&y.si_sdri_avg))
            .ok_or_else(|| anyhow!("empty sigma grid"))?;
        println!(
            "{} steps={steps} best sigma_max={} si_sdri_avg={:.4}",
            model.name(),
            best.sigma_max,
            best.si_sdri_avg
        );
    }
    Ok(())
}
