//! `hetpref` command-line entry point.
//!
//! Every subcommand accepts `--config <file.json>` whose keys mirror the long
//! flags (snake_case). Flags win over the file; unknown keys are rejected.
//! Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use hetpref::datasets::{DatasetFile, FullMode, Generator, Records, DEFAULT_CONSENSUS_CAP};
use hetpref::gradcheck::{check_many, LossKind, DEFAULT_STEP, DEFAULT_TOLERANCE};
use hetpref::losses::{
    estimate_joint, AltConsistent, ConsistentAgreement, CorrectedDpo, Dpo, LossConfig, Objective, DEFAULT_MIN_COUNT,
};
use hetpref::optim::{train, write_loss_trace, AdamConfig, LrSchedule, TrainConfig, TrainOutcome};
use hetpref::survey::{read_questions, sensitivity_scan, survey_rankings, ScanConfig, DEFAULT_SMOOTHING};
use hetpref::synth::{
    baselines, mean_kl, ordinal_metrics, reduce_1d, run_experiment, CircularEnvConfig, ExperimentConfig, Method,
    OneDCurve, DEFAULT_TIE_TOL,
};
use hetpref::verify::verify_examples;
use hetpref::{Link, Policy};

const SEED_ENV: &str = "HETPREF_SEED";
const PARAMS_FORMAT: &str = "hetpref-params-v1";

#[derive(Parser)]
#[command(name = "hetpref", version, about = "Preference alignment with heterogeneous annotators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a preference dataset from the circular environment.
    GenData(Common<GenData>),
    /// Train a tabular policy on a dataset file.
    Train(Common<TrainArgs>),
    /// Compare trained parameters with the environment's optimal policy and Borda count.
    Eval(Common<EvalArgs>),
    /// Generate data, train, and evaluate one method end to end.
    SynthRun(Common<SynthRun>),
    /// Borda-count and average-reward rankings for survey questions.
    SurveyRank(Common<SurveyRank>),
    /// Minimum total-variation flips for survey questions.
    SurveySensitivity(Common<SurveySensitivity>),
    /// Evaluate the built-in worked examples.
    VerifyExamples(Common<VerifyArgs>),
    /// Finite-difference gradient checks on random instances.
    GradCheck(Common<GradCheckArgs>),
}

#[derive(Args)]
struct Common<T: Args> {
    /// JSON file with defaults for any flag of this subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    args: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum KindArg {
    Anonymous,
    Paired,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum FullModeArg {
    Vector,
    Consensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum MethodArg {
    Dpo,
    CorrectedDpo,
    Consistent,
    AltConsistent,
    AvgRewardRelabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum ScheduleArg {
    Constant,
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum LossArg {
    All,
    Dpo,
    CorrectedDpo,
    Consistent,
    AltConsistent,
    RewardMle,
}

/// Training knobs shared by `train` and `synth-run`.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainKnobs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    /// Inverse KL-regularization strength.
    #[arg(long)]
    beta: Option<f64>,
    /// Correction strength for corrected DPO.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    detach_variance: Option<bool>,
    /// Minimum pair count before a J entry is considered reliable.
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    eps_log: Option<f64>,
}

impl TrainKnobs {
    fn train_config(&self, seed: u64) -> TrainConfig<f64> {
        let d = TrainConfig::<f64>::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            schedule: match self.schedule {
                Some(ScheduleArg::LinearDecay) => LrSchedule::LinearDecay,
                _ => LrSchedule::Constant,
            },
            seed,
            eval_every: 0,
            adam: AdamConfig {
                lr: self.lr.unwrap_or(d.adam.lr),
                ..AdamConfig::default()
            },
        }
    }

    fn loss_config(&self, beta_default: f64) -> LossConfig<f64> {
        let d = LossConfig::<f64>::default();
        LossConfig {
            beta: self.beta.unwrap_or(beta_default),
            alpha: self.alpha.unwrap_or(d.alpha),
            eps_log: self.eps_log.unwrap_or(d.eps_log),
            detach_variance: self.detach_variance.unwrap_or(d.detach_variance),
        }
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenData {
    /// Output JSONL path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    full_mode: Option<FullModeArg>,
    #[arg(long)]
    consensus_cap: Option<usize>,
    /// Parallel generation shards (anonymous data only); 1 keeps the single-stream layout.
    #[arg(long)]
    shards: Option<usize>,
    #[arg(skip)]
    env: Option<CircularEnvConfig>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainArgs {
    /// Dataset JSONL (anonymous for DPO variants, full for consistent losses).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Paired dataset JSONL used to estimate J for corrected DPO.
    #[arg(long)]
    paired: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Table size; inferred from the largest index in the data when absent.
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    n_responses: Option<usize>,
    /// Output parameters JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional loss-trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalArgs {
    /// Parameters JSON written by `train`.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    tie_tol: Option<f64>,
    /// Output report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for curve CSVs.
    #[arg(long)]
    curves_dir: Option<PathBuf>,
    #[arg(skip)]
    env: Option<CircularEnvConfig>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthRun {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tie_tol: Option<f64>,
    /// Directory for report.json, curve CSVs and the loss trace.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    knobs: TrainKnobs,
    #[arg(skip)]
    env: Option<CircularEnvConfig>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SurveyRank {
    /// Newline-delimited question JSON.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    smoothing: Option<f64>,
    /// Output rankings JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SurveySensitivity {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    smoothing: Option<f64>,
    /// Minimum probability kept by every option.
    #[arg(long)]
    eps: Option<f64>,
    /// Required Borda-count margin after the flip.
    #[arg(long)]
    delta: Option<f64>,
    /// Directory for sensitivity.json and cdf.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct VerifyArgs {
    /// Also write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GradCheckArgs {
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    instances: Option<usize>,
    /// Logit table side length.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Configuration problems (exit 2) versus failures while running (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<hetpref::Error> for Failure {
    fn from(e: hetpref::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

/// Overlays flags that were given onto the config file's values.
fn merge<T: Args + Serialize + DeserializeOwned>(common: Common<T>) -> std::result::Result<T, Failure> {
    let Some(path) = common.config else {
        return Ok(common.args);
    };
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("reading config {}: {e}", path.display())))?;
    let mut base: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("parsing config {}: {e}", path.display())))?;
    // typed pass first so unknown keys and bad types are reported against the file
    serde_json::from_value::<T>(base.clone()).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let flags = serde_json::to_value(&common.args).map_err(usage)?;
    if let (Value::Object(b), Value::Object(f)) = (&mut base, flags) {
        for (k, v) in f {
            if !v.is_null() {
                b.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).map_err(|e| usage(format!("merging config: {e}")))
}

fn need<T>(v: Option<T>, name: &str) -> std::result::Result<T, Failure> {
    v.ok_or_else(|| usage(format!("missing required option --{}", name.replace('_', "-"))))
}

fn existing(path: Option<PathBuf>, name: &str) -> std::result::Result<PathBuf, Failure> {
    let p = need(path, name)?;
    if !p.is_file() {
        return Err(usage(format!("--{} {}: no such file", name.replace('_', "-"), p.display())));
    }
    Ok(p)
}

/// Flag or config, then `HETPREF_SEED`, then 0.
fn resolve_seed(seed: Option<u64>) -> std::result::Result<u64, Failure> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn check_env(env: Option<CircularEnvConfig>) -> std::result::Result<CircularEnvConfig, Failure> {
    let env = env.unwrap_or_default();
    env.validate().map_err(usage)?;
    Ok(env)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_curves(dir: &Path, curves: &[(&str, &OneDCurve<f64>)]) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, curve) in curves {
        let mut w = create(&dir.join(format!("curve_{name}.csv")))?;
        curve.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn core_method(m: MethodArg, alpha: Option<f64>) -> Method {
    match m {
        MethodArg::Dpo => Method::Dpo,
        MethodArg::CorrectedDpo => Method::CorrectedDpo {
            alpha: alpha.unwrap_or(1.0),
        },
        MethodArg::Consistent => Method::Consistent,
        MethodArg::AltConsistent => Method::AltConsistent,
        MethodArg::AvgRewardRelabel => Method::AvgRewardRelabel,
    }
}

fn gen_data(a: GenData) -> Outcome {
    let out = need(a.out, "out")?;
    let kind = a.kind.unwrap_or(KindArg::Anonymous);
    let n = need(a.samples, "samples")?;
    let seed = resolve_seed(a.seed)?;
    let shards = a.shards.unwrap_or(1);
    if shards == 0 {
        return Err(usage("--shards must be at least 1"));
    }
    if shards > 1 && kind != KindArg::Anonymous {
        return Err(usage("--shards applies to anonymous data only"));
    }
    let env = check_env(a.env)?;
    let rewards = env.reward_table::<f64>()?;
    let pop = env.population::<f64>()?;
    let prompt = vec![1.0 / env.n as f64; env.n];
    let resp = hetpref::SamplingDistribution::uniform(env.n, env.n);
    let g = Generator::new(&rewards, &pop, Link::logistic(), &prompt, &resp)?;
    let records = match kind {
        KindArg::Anonymous if shards > 1 => Records::Anonymous(g.sample_anonymous_sharded(n, seed, shards)?),
        KindArg::Anonymous => Records::Anonymous(g.sample_anonymous(n, seed)?),
        KindArg::Paired => Records::Paired(g.sample_paired(n, seed)?),
        KindArg::Full => match a.full_mode.unwrap_or(FullModeArg::Vector) {
            FullModeArg::Vector => g.sample_full(n, seed, FullMode::Vector)?,
            FullModeArg::Consensus => {
                Records::Anonymous(g.sample_consensus(n, seed, a.consensus_cap.unwrap_or(DEFAULT_CONSENSUS_CAP))?)
            }
        },
    };
    let file = DatasetFile::new(seed, g.config_hash().to_string(), records);
    let mut w = create(&out)?;
    file.write_jsonl(&mut w)?;
    w.flush()?;
    println!("wrote {} records to {}", file.records.len(), out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    method: MethodArg,
    n_prompts: usize,
    n_responses: usize,
    logits: Vec<Vec<f64>>,
}

fn infer_size(records: &Records) -> (usize, usize) {
    let mut nx = 0;
    let mut ny = 0;
    let mut see = |x: usize, y1: usize, y2: usize| {
        nx = nx.max(x + 1);
        ny = ny.max(y1.max(y2) + 1);
    };
    match records {
        Records::Anonymous(v) => v.iter().for_each(|s| see(s.x, s.y1, s.y2)),
        Records::Paired(v) => v.iter().for_each(|s| see(s.first.x, s.first.y1, s.first.y2)),
        Records::Full(v) => v.iter().for_each(|s| see(s.x, s.y1, s.y2)),
    }
    (nx, ny)
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let data_path = existing(a.data, "data")?;
    let method = need(a.method, "method")?;
    let out = need(a.out, "out")?;
    let seed = resolve_seed(a.seed)?;
    let paired_path = match method {
        MethodArg::CorrectedDpo => Some(existing(a.paired, "paired")?),
        MethodArg::AvgRewardRelabel => return Err(usage("avg_reward_relabel is available through synth-run only")),
        _ => None,
    };
    let cfg = a.knobs.train_config(seed);
    cfg.validate().map_err(usage)?;
    let loss_cfg = a.knobs.loss_config(1.0);
    loss_cfg.validate().map_err(usage)?;

    let data = DatasetFile::load(&data_path)?;
    let (ix, iy) = infer_size(&data.records);
    let (nx, ny) = (a.n_prompts.unwrap_or(ix), a.n_responses.unwrap_or(iy));
    if nx < ix || ny < iy || ny < 2 {
        return Err(usage(format!("table {nx}x{ny} cannot hold indices up to {ix}x{iy}")));
    }
    let pi_ref = Policy::uniform(nx, ny);
    let init = Array2::zeros((nx, ny));

    fn fit<O: Objective<f64>>(
        o: &O,
        s: &[O::Sample],
        init: &Array2<f64>,
        cfg: &TrainConfig<f64>,
    ) -> hetpref::Result<TrainOutcome<f64>> {
        train(o, s, None, init, cfg)
    }

    let outcome = match (method, &data.records) {
        (MethodArg::Dpo, Records::Anonymous(s)) => fit(&Dpo::new(&pi_ref, LossConfig { alpha: 0.0, ..loss_cfg })?, s, &init, &cfg)?,
        (MethodArg::CorrectedDpo, Records::Anonymous(s)) => {
            let paired = DatasetFile::load(paired_path.expect("checked above"))?;
            let Records::Paired(p) = &paired.records else {
                return Err(usage("--paired must be a paired dataset"));
            };
            let joint = estimate_joint(p, a.knobs.min_count.unwrap_or(DEFAULT_MIN_COUNT))?;
            fit(&CorrectedDpo::new(&pi_ref, joint, loss_cfg)?, s, &init, &cfg)?
        }
        (MethodArg::Consistent, Records::Full(s)) => fit(&ConsistentAgreement::new(&pi_ref, loss_cfg)?, s, &init, &cfg)?,
        (MethodArg::AltConsistent, Records::Full(s)) => fit(&AltConsistent::new(&pi_ref, loss_cfg)?, s, &init, &cfg)?,
        (m, r) => {
            return Err(usage(format!(
                "method {} cannot train on a {} dataset",
                serde_json::to_string(&m).unwrap_or_default(),
                serde_json::to_string(&r.kind()).unwrap_or_default()
            )))
        }
    };
    let params = ParamsFile {
        format: PARAMS_FORMAT.into(),
        method,
        n_prompts: nx,
        n_responses: ny,
        logits: outcome.params.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    write_json(&out, &params)?;
    if let Some(trace) = a.trace {
        let mut w = create(&trace)?;
        write_loss_trace(&outcome.trace, &mut w)?;
        w.flush().context("writing trace")?;
    }
    println!(
        "trained {} steps, final loss {:.16e}, variance clamps {}",
        outcome.steps,
        outcome.trace.last().map_or(f64::NAN, |r| r.loss),
        outcome.clamped
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    n: usize,
    kendall_vs_nbc: hetpref::synth::KendallTau,
    kendall_vs_optimal: hetpref::synth::KendallTau,
    kl_to_optimal: f64,
    policy_curve: OneDCurve<f64>,
    optimal_curve: OneDCurve<f64>,
    nbc_curve: OneDCurve<f64>,
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let params_path = existing(a.params, "params")?;
    let out = need(a.out, "out")?;
    let env = check_env(a.env)?;
    let file: ParamsFile = serde_json::from_reader(BufReader::new(File::open(&params_path)?))
        .map_err(|e| usage(format!("{}: {e}", params_path.display())))?;
    if file.format != PARAMS_FORMAT {
        return Err(usage(format!("unsupported params format {:?}", file.format)));
    }
    if file.n_prompts != env.n || file.n_responses != env.n {
        return Err(usage(format!(
            "params are {}x{} but the environment has n = {}",
            file.n_prompts, file.n_responses, env.n
        )));
    }
    let flat: Vec<f64> = file.logits.concat();
    let logits = Array2::from_shape_vec((env.n, env.n), flat).map_err(|e| usage(format!("logits: {e}")))?;
    let policy = Policy::from_logits(logits)?.probs();
    let base = baselines(&env)?;
    let tie = a.tie_tol.unwrap_or(DEFAULT_TIE_TOL);
    let policy_curve = reduce_1d(&policy)?;
    let optimal_curve = reduce_1d(&base.optimal)?;
    let nbc_curve = reduce_1d(&base.nbc)?;
    let report = EvalReport {
        n: env.n,
        kendall_vs_nbc: ordinal_metrics(&policy_curve.mean, &nbc_curve.mean, tie)?,
        kendall_vs_optimal: ordinal_metrics(&policy_curve.mean, &optimal_curve.mean, tie)?,
        kl_to_optimal: mean_kl(&policy, &base.optimal),
        policy_curve,
        optimal_curve,
        nbc_curve,
    };
    write_json(&out, &report)?;
    if let Some(dir) = a.curves_dir {
        write_curves(
            &dir,
            &[
                ("policy", &report.policy_curve),
                ("optimal", &report.optimal_curve),
                ("nbc", &report.nbc_curve),
            ],
        )?;
    }
    println!(
        "kendall vs nbc {:?}, kendall vs optimal {:?}, kl {:.6e}",
        report.kendall_vs_nbc.tau, report.kendall_vs_optimal.tau, report.kl_to_optimal
    );
    Ok(())
}

#[derive(Serialize)]
struct SynthReportFile<'a> {
    format: &'static str,
    env: &'a CircularEnvConfig,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    #[serde(flatten)]
    report: &'a hetpref::synth::ExperimentReport,
}

fn synth_run(a: SynthRun) -> Outcome {
    let method = need(a.method, "method")?;
    let out_dir = need(a.out_dir, "out_dir")?;
    let env = check_env(a.env)?;
    let seed = resolve_seed(a.seed)?;
    let defaults = ExperimentConfig::default();
    let cfg = ExperimentConfig {
        n_samples: a.samples.unwrap_or(defaults.n_samples),
        seed,
        train: a.knobs.train_config(seed),
        eps_log: a.knobs.eps_log.unwrap_or(defaults.eps_log),
        detach_variance: a.knobs.detach_variance.unwrap_or(false),
        min_count: a.knobs.min_count.unwrap_or(DEFAULT_MIN_COUNT),
        tie_tol: a.tie_tol.unwrap_or(DEFAULT_TIE_TOL),
        env,
        ..defaults
    };
    cfg.train.validate().map_err(usage)?;
    if a.knobs.beta.is_some_and(|b| b != cfg.env.beta) {
        return Err(usage("set beta through the env config for synth-run"));
    }
    let report = run_experiment(core_method(method, a.knobs.alpha), &cfg)?;
    let file = SynthReportFile {
        format: "hetpref-synth-report-v1",
        env: &cfg.env,
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.adam.lr,
        report: &report,
    };
    write_json(&out_dir.join("report.json"), &file)?;
    write_curves(&out_dir, &report.curves())?;
    let mut w = create(&out_dir.join("loss_trace.csv"))?;
    write_loss_trace(&report.trace, &mut w)?;
    w.flush()?;
    println!(
        "{}: kendall vs nbc {:?}, kendall vs optimal {:?}, kl {:.6e}",
        report.method.label(),
        report.kendall_vs_nbc.tau,
        report.kendall_vs_optimal.tau,
        report.kl_to_optimal
    );
    Ok(())
}

fn load_survey(input: Option<PathBuf>) -> std::result::Result<Vec<hetpref::survey::SurveyQuestion>, Failure> {
    let path = existing(input, "input")?;
    read_questions(BufReader::new(File::open(&path)?))
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn survey_rank(a: SurveyRank) -> Outcome {
    let questions = load_survey(a.input)?;
    let smoothing = a.smoothing.unwrap_or(DEFAULT_SMOOTHING);
    let link = Link::logistic();
    let rankings = questions
        .iter()
        .map(|q| survey_rankings(q, None, smoothing, &link))
        .collect::<hetpref::Result<Vec<_>>>()?;
    match a.out {
        Some(path) => write_json(&path, &rankings)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &rankings).context("writing rankings")?;
            writeln!(stdout)?;
        }
    }
    Ok(())
}

fn survey_sensitivity(a: SurveySensitivity) -> Outcome {
    let questions = load_survey(a.input)?;
    let out_dir = need(a.out_dir, "out_dir")?;
    let d = ScanConfig::<f64>::default();
    let cfg = ScanConfig {
        smoothing: a.smoothing.unwrap_or(d.smoothing),
        eps: a.eps.unwrap_or(d.eps),
        delta: a.delta.unwrap_or(d.delta),
        ..d
    };
    let report = sensitivity_scan(&questions, &Link::logistic(), &cfg)?;
    write_json(&out_dir.join("sensitivity.json"), &report)?;
    let mut w = create(&out_dir.join("cdf.csv"))?;
    report.write_cdf_csv(&mut w)?;
    w.flush()?;
    let flippable = report.questions.iter().filter(|q| q.min_tv.is_some()).count();
    println!(
        "{} questions analyzed, {} flippable, {} skipped",
        report.questions.len(),
        flippable,
        report.skipped.len()
    );
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> Outcome {
    let checks = verify_examples()?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{:<4}  {:<width$}  expected {}  computed {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.expected,
            c.computed
        );
    }
    if let Some(path) = a.out {
        write_json(&path, &checks)?;
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} check(s) failed")));
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> Outcome {
    let kinds: Vec<LossKind> = match a.loss.unwrap_or(LossArg::All) {
        LossArg::All => LossKind::ALL.to_vec(),
        LossArg::Dpo => vec![LossKind::Dpo],
        LossArg::CorrectedDpo => vec![LossKind::CorrectedDpo],
        LossArg::Consistent => vec![LossKind::Consistent],
        LossArg::AltConsistent => vec![LossKind::AltConsistent],
        LossArg::RewardMle => vec![LossKind::RewardMle],
    };
    let instances = a.instances.unwrap_or(20);
    let size = a.size.unwrap_or(5);
    if !(2..=10).contains(&size) {
        return Err(usage("--size must be between 2 and 10"));
    }
    let step = a.step.unwrap_or(DEFAULT_STEP);
    let tol = a.tolerance.unwrap_or(DEFAULT_TOLERANCE);
    let seed = resolve_seed(a.seed)?;
    let mut failed = Vec::new();
    for kind in kinds {
        let errs = check_many(kind, size, instances, seed, step)?;
        let worst = errs.iter().copied().fold(0.0, f64::max);
        let pass = worst <= tol;
        println!(
            "{:<4}  {:<14}  instances {instances}  max relative error {worst:.3e}",
            if pass { "PASS" } else { "FAIL" },
            kind.name()
        );
        if !pass {
            failed.push(kind.name());
        }
    }
    if !failed.is_empty() {
        return Err(Failure::Runtime(anyhow!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData(c) => gen_data(merge(c)?),
        Command::Train(c) => train_cmd(merge(c)?),
        Command::Eval(c) => eval_cmd(merge(c)?),
        Command::SynthRun(c) => synth_run(merge(c)?),
        Command::SurveyRank(c) => survey_rank(merge(c)?),
        Command::SurveySensitivity(c) => survey_sensitivity(merge(c)?),
        Command::VerifyExamples(c) => verify_cmd(merge(c)?),
        Command::GradCheck(c) => grad_check_cmd(merge(c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors and 0 for --help/--version
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
