use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use latent_grpo::config::RunConfig;
use latent_grpo::eval::{evaluate, EvalReport};
use latent_grpo::policy::{Checkpoint, PolicyParams, RolloutMode, CHECKPOINT_FORMAT};
use latent_grpo::task::{make_warmup_corpus, write_corpus};
use latent_grpo::trainer::{eval_tasks, Algorithm, StepMetrics, Trainer};
use latent_grpo::verify::{verify_gradients, Fault};
use latent_grpo::warmup::{warmup, WarmupReport};
use latent_grpo::Error;

pub const OUTPUT_ROOT_ENV: &str = "LATENT_GRPO_OUTPUT_ROOT";

#[derive(Debug)]
pub enum CliError {
    /// Usage, configuration and I/O problems (exit 1).
    Usage(anyhow::Error),
    /// Verification or gate failure (exit 2).
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failed(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "{e:#}"),
            CliError::Failed(msg) => f.write_str(msg),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Usage(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Gate(msg) => CliError::Failed(msg),
            other => CliError::Usage(other.into()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// Latent deterministic decoding.
    NoSampling,
    /// Gumbel-perturbed latent decoding.
    Sampled,
    /// Explicit greedy decoding, categorical sampling for pass@k.
    Explicit,
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    output_root().join(&cfg.run.output_dir)
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display())).map_err(Into::into)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n")?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: String,
}

fn manifest(cfg: &RunConfig, command: &str, artifacts: BTreeMap<String, PathBuf>, started: String) -> RunManifest {
    RunManifest {
        run_id: cfg.run_id(),
        command: command.to_string(),
        seed: cfg.run.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        artifacts,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: started,
        finished_at: chrono::Utc::now().to_rfc3339(),
    }
}

pub const WARMUP_CHECKPOINT: &str = "warmup.json";

pub fn warmup_into(cfg: &RunConfig, dir: &Path, gate: bool) -> CliResult<WarmupReport> {
    let started = chrono::Utc::now().to_rfc3339();
    let corpus = make_warmup_corpus(
        cfg.warmup.corpus_size,
        (cfg.warmup.difficulty[0], cfg.warmup.difficulty[1]),
        cfg.warmup.seed,
    )?;
    let (params, report) = warmup(cfg, &corpus)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let report_path = dir.join("warmup_report.json");
    write_json(&report_path, &report)?;
    if gate && !report.passed {
        return Err(CliError::Failed(format!("warmup gate not met: {}", report.summary(cfg))));
    }
    let corpus_path = dir.join("warmup_corpus.jsonl");
    let instances: Vec<_> = corpus.iter().map(|e| e.instance.clone()).collect();
    write_corpus(&corpus_path, &instances)?;
    let ck_path = dir.join(WARMUP_CHECKPOINT);
    Checkpoint {
        format_version: CHECKPOINT_FORMAT,
        kind: "warmup".into(),
        step: 0,
        rng_seed: cfg.warmup.seed,
        config_hash: cfg.hash(),
        params,
        reference: None,
        consecutive_skips: 0,
        skipped_total: 0,
    }
    .save(&ck_path)?;
    let artifacts = BTreeMap::from([
        ("checkpoint".to_string(), ck_path),
        ("report".to_string(), report_path),
        ("corpus".to_string(), corpus_path),
    ]);
    write_json(&dir.join("warmup_manifest.json"), &manifest(cfg, "warmup", artifacts, started))?;
    Ok(report)
}

pub fn cmd_warmup(config: &Path, gate: bool) -> CliResult<()> {
    let cfg = load_config(config)?;
    let dir = run_dir(&cfg);
    let report = warmup_into(&cfg, &dir, gate)?;
    println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
    eprintln!("warmup: {}", report.summary(&cfg));
    Ok(())
}

/// One line of a metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricRecord {
    /// Held-out evaluation of the starting parameters.
    Baseline { run_id: String, algorithm: Algorithm, step: u64, pass_at_1: f64, mean_length: f64 },
    Step(StepMetrics),
    Summary(TrainSummary),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub variant: String,
    pub algorithm: Algorithm,
    pub steps: u64,
    pub baseline_pass_at_1: f64,
    pub baseline_mean_length: f64,
    pub final_pass_at_1: f64,
    pub final_mean_length: f64,
    pub peak_pass_at_1: f64,
    pub min_valid_fraction: f64,
    pub skipped_total: u64,
}

fn read_records(path: &Path) -> anyhow::Result<Vec<MetricRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = vec![];
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn append(file: &mut fs::File, rec: &MetricRecord) -> anyhow::Result<()> {
    writeln!(file, "{}", serde_json::to_string(rec)?)?;
    file.flush()?;
    Ok(())
}

pub fn summarize(variant: &str, records: &[MetricRecord]) -> Option<TrainSummary> {
    let (mut baseline, mut run) = (None, None);
    let mut steps = vec![];
    for r in records {
        match r {
            MetricRecord::Baseline { pass_at_1, mean_length, run_id, algorithm, .. } => {
                baseline = Some((*pass_at_1, *mean_length));
                run = Some((run_id.clone(), *algorithm));
            }
            MetricRecord::Step(m) => steps.push(m),
            MetricRecord::Summary(_) => {}
        }
    }
    let (b_pass, b_len) = baseline?;
    let (run_id, algorithm) = run?;
    let evals: Vec<(f64, f64)> = steps.iter().filter_map(|m| Some((m.pass_at_1?, m.mean_length?))).collect();
    let (final_pass, final_len) = evals.last().copied().unwrap_or((b_pass, b_len));
    Some(TrainSummary {
        run_id,
        variant: variant.to_string(),
        algorithm,
        steps: steps.last().map_or(0, |m| m.step),
        baseline_pass_at_1: b_pass,
        baseline_mean_length: b_len,
        final_pass_at_1: final_pass,
        final_mean_length: final_len,
        peak_pass_at_1: evals.iter().map(|e| e.0).fold(b_pass, f64::max),
        min_valid_fraction: steps.iter().map(|m| m.valid_fraction).fold(1.0, f64::min),
        skipped_total: steps.last().map_or(0, |m| m.skipped_total),
    })
}

/// Runs (or resumes) one training run inside `dir`, writing
/// `metrics_<variant>.jsonl`, `checkpoint_<variant>.json` and a manifest.
pub fn train_into(
    cfg: &RunConfig,
    algorithm: Algorithm,
    variant: &str,
    dir: &Path,
    init: &Path,
    resume: bool,
    max_steps: Option<u64>,
) -> CliResult<Option<TrainSummary>> {
    let started = chrono::Utc::now().to_rfc3339();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics_path = dir.join(format!("metrics_{variant}.jsonl"));
    let ck_path = dir.join(format!("checkpoint_{variant}.json"));

    let (mut trainer, mut file) = if resume {
        let ck = Checkpoint::load(&ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
        let trainer = Trainer::resume(algorithm, cfg.clone(), ck)?;
        // Drop records written after the checkpoint.
        let kept: Vec<MetricRecord> = read_records(&metrics_path)?
            .into_iter()
            .filter(|r| match r {
                MetricRecord::Baseline { .. } => true,
                MetricRecord::Step(m) => m.step <= trainer.step,
                MetricRecord::Summary(_) => false,
            })
            .collect();
        let mut file = fs::File::create(&metrics_path).map_err(anyhow::Error::from)?;
        for r in &kept {
            append(&mut file, r)?;
        }
        (trainer, file)
    } else {
        let params = load_init(cfg, algorithm, init)?;
        let trainer = Trainer::new(algorithm, cfg.clone(), params)?;
        let mut file = fs::File::create(&metrics_path).map_err(anyhow::Error::from)?;
        let base = trainer.evaluate()?;
        append(
            &mut file,
            &MetricRecord::Baseline {
                run_id: trainer.run_id().to_string(),
                algorithm,
                step: 0,
                pass_at_1: base.pass_at_1,
                mean_length: base.mean_length,
            },
        )?;
        (trainer, file)
    };

    let stop_at = max_steps.map_or(cfg.rl.total_steps, |m| (trainer.step + m).min(cfg.rl.total_steps));
    while trainer.step < stop_at {
        let m = trainer.train_step()?;
        append(&mut file, &MetricRecord::Step(m))?;
        if trainer.step % cfg.rl.checkpoint_interval == 0 || trainer.step == stop_at {
            trainer.checkpoint().save(&ck_path)?;
        }
    }

    let summary = if trainer.done() {
        let s = summarize(variant, &read_records(&metrics_path)?);
        if let Some(s) = &s {
            append(&mut file, &MetricRecord::Summary(s.clone()))?;
        }
        s
    } else {
        None
    };
    let artifacts = BTreeMap::from([
        ("checkpoint".to_string(), ck_path),
        ("metrics".to_string(), metrics_path),
        ("init".to_string(), init.to_path_buf()),
    ]);
    write_json(
        &dir.join(format!("manifest_{variant}.json")),
        &manifest(cfg, &format!("train {algorithm} ({variant})"), artifacts, started),
    )?;
    Ok(summary)
}

fn load_init(cfg: &RunConfig, algorithm: Algorithm, init: &Path) -> CliResult<PolicyParams> {
    match Checkpoint::load(init) {
        Ok(ck) => Ok(ck.params),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound && !algorithm.is_latent() => {
            Ok(PolicyParams::init(&cfg.model)?)
        }
        Err(e) => Err(CliError::Usage(anyhow!(
            "{algorithm} needs a warmup checkpoint at {} ({e})",
            init.display()
        ))),
    }
}

pub fn cmd_train(
    config: &Path,
    algorithm: &str,
    resume: bool,
    init: Option<&Path>,
    max_steps: Option<u64>,
) -> CliResult<()> {
    let algorithm: Algorithm = algorithm.parse()?;
    let cfg = load_config(config)?;
    let dir = run_dir(&cfg);
    let init = init.map(Path::to_path_buf).unwrap_or_else(|| dir.join(WARMUP_CHECKPOINT));
    if let Some(s) = train_into(&cfg, algorithm, algorithm.name(), &dir, &init, resume, max_steps)? {
        println!("{}", serde_json::to_string(&s).map_err(anyhow::Error::from)?);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    run_id: String,
    checkpoint: &'a Path,
    k: usize,
    pass_at_k_requested: f64,
    #[serde(flatten)]
    report: EvalReport,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    mode: EvalMode,
    k: usize,
    n: usize,
    noise: Option<f64>,
    per_prompt: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    if k == 0 || k > n {
        return Err(CliError::Usage(anyhow!("--k must satisfy 1 <= k <= n (k={k}, n={n})")));
    }
    let cfg = load_config(config)?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (det, sampled) = match mode {
        EvalMode::NoSampling => (RolloutMode::LatentDeterministic, RolloutMode::LatentDeterministic),
        EvalMode::Sampled => (RolloutMode::LatentDeterministic, RolloutMode::LatentSampledInference),
        EvalMode::Explicit => (RolloutMode::ExplicitGreedy, RolloutMode::ExplicitSampled),
    };
    let noise = noise.unwrap_or(cfg.eval.noise_scale);
    let tasks = eval_tasks(&cfg)?;
    let mut report = evaluate(&ck.params, &tasks, det, sampled, &cfg.rl.rollout_settings(), n, noise, cfg.run.seed)?;
    let requested = latent_grpo::eval::pass_at_k_mean(&report.per_prompt, n, k)?;
    if !per_prompt {
        report.per_prompt.clear();
    }
    let output = EvalOutput { run_id: cfg.run_id(), checkpoint, k, pass_at_k_requested: requested, report };
    let text = serde_json::to_string(&output).map_err(anyhow::Error::from)?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn cmd_verify_gradients(trials: usize, seed: u64, fault: Fault) -> CliResult<()> {
    let report = verify_gradients(trials, seed, fault)?;
    let summary = serde_json::json!({
        "trials": report.trials,
        "seed": report.seed,
        "reports": report.reports,
        "max_rel_error": report.max_rel_error,
        "crossed_instances": report.crossed_instances,
        "alignment_violations": report.alignment_violations,
        "missing_witnesses": report.missing_witnesses,
        "failed_identities": report.failed_identities(),
        "passed": report.passed(),
    });
    println!("{summary}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient identities failed: {}", report.failed_identities().join(", "))))
    }
}

/// Algorithm and switch overrides of a sweep variant.
pub fn variant_config(base: &RunConfig, variant: &str) -> CliResult<(Algorithm, RunConfig)> {
    latent_grpo::trainer::variant_config(base, variant).map_err(|e| CliError::Usage(e.into()))
}

pub fn cmd_sweep(config: &Path, seeds: &[u64], variants: &[String]) -> CliResult<()> {
    let base = load_config(config)?;
    for v in variants {
        variant_config(&base, v)?;
    }
    let root = run_dir(&base);
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let mut table = fs::File::create(root.join("sweep.jsonl")).map_err(anyhow::Error::from)?;
    for &seed in seeds {
        let cfg = base.reseeded(seed);
        let dir = root.join(format!("seed{seed}"));
        let report = warmup_into(&cfg, &dir, true)?;
        eprintln!("seed {seed} warmup: {}", report.summary(&cfg));
        for v in variants {
            let (alg, vcfg) = variant_config(&cfg, v)?;
            let summary = train_into(&vcfg, alg, v, &dir, &dir.join(WARMUP_CHECKPOINT), false, None)?
                .ok_or_else(|| anyhow!("run {v} for seed {seed} produced no summary"))?;
            eprintln!(
                "seed {seed} {v}: pass@1 {:.3} -> {:.3} (peak {:.3}), #L {:.2} -> {:.2}",
                summary.baseline_pass_at_1,
                summary.final_pass_at_1,
                summary.peak_pass_at_1,
                summary.baseline_mean_length,
                summary.final_mean_length
            );
            writeln!(table, "{}", serde_json::json!({ "seed": seed, "summary": summary })).map_err(anyhow::Error::from)?;
        }
    }
    Ok(())
}
