//! Command-line front end: run configuration, subcommands and report files.
//!
//! Every command reads one JSON config (all fields optional) and writes its
//! artifacts under the output directory:
//!
//! | command           | writes                                                  |
//! |-------------------|---------------------------------------------------------|
//! | `train-utilities` | `ensemble.json`, `train_log.csv`                        |
//! | `label`           | `labeled.jsonl`, `percentiles.json`                     |
//! | `train-policy`    | `policy.json`, `stats.csv`, `offline_labeled.jsonl`     |
//! | `infer`           | `infer.json` (also printed)                             |
//! | `eval`            | `<metric>.json`, `<metric>.csv`, `pareto.svg`           |
//!
//! Nothing time-dependent is written, so reruns are byte-identical.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{train_ensemble_logged, EnsembleConfig, UtilityEnsemble};
use crate::error::{Error, Result};
use crate::experiments::{consistency_report, sweep_hypervolume, sweep_stages};
use crate::labeler::{index_to_letter, label_dataset, label_histogram, read_raw_jsonl, write_jsonl, DEFAULT_TOKEN};
use crate::metrics::{
    constraint_satisfaction, gen_constraints, gen_variance_weights, variance_objective, MetricsReport,
    PolicySampleSet,
};
use crate::policy_sim::{
    run_pipeline, run_pipeline_from_samples, OnlineConfig, PipelineConfig, StageResult, SynthEnv,
};
use crate::preference::{build_inference_prompt, PreferenceVector, RewardBounds};
use crate::reward_stats::RunningBounds;

pub const SEED_ENV: &str = "UCMOA_SEED";

const STREAM_METRIC_SAMPLES: u64 = 8192;
const STREAM_METRIC_PREFS: u64 = 8193;

#[derive(Debug, Parser)]
#[command(name = "ucmoa", version, about = "Utility-conditioned multi-objective alignment toolkit")]
pub struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed and UCMOA_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `paths.out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the diverse utility ensemble.
    TrainUtilities,
    /// Label an input JSONL file with max-utility tokens.
    Label,
    /// Offline then online conditioned training on the simulator.
    TrainPolicy {
        #[arg(long)]
        online_iters: Option<usize>,
    },
    /// Map a preference vector to a conditioning token.
    Infer {
        /// Comma-separated weights in [0,1], e.g. 0.7,0.3
        #[arg(long)]
        preference: String,
    },
    /// Evaluate trained artifacts.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Pareto,
    Constraints,
    Variance,
    Consistency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleBlock {
    pub steps: usize,
    pub batch: usize,
    pub pair_batch: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub maximize_diversity: bool,
    pub standardize_range: bool,
    pub probe_size: usize,
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        let d = EnsembleConfig::default();
        EnsembleBlock {
            steps: d.steps,
            batch: d.batch,
            pair_batch: d.pair_batch,
            learning_rate: d.learning_rate,
            hidden: d.hidden,
            maximize_diversity: d.maximize_diversity,
            standardize_range: d.standardize_range,
            probe_size: d.probe_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorBlock {
    /// Environment JSON; the bundled two-objective environment when absent.
    pub env: Option<PathBuf>,
    pub n_offline: usize,
    pub offline_epochs: usize,
    pub learning_rate: f64,
    pub online_iters: usize,
    pub n_stat: usize,
    pub online: OnlineConfig,
}

impl Default for SimulatorBlock {
    fn default() -> Self {
        let d = PipelineConfig::default();
        SimulatorBlock {
            env: None,
            n_offline: d.n_offline,
            offline_epochs: d.offline_epochs,
            learning_rate: d.learning_rate,
            online_iters: d.online_iters,
            n_stat: d.n_stat,
            online: d.online,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsBlock {
    /// Number of random constraints / weight draws.
    pub m: usize,
    pub n_rows: usize,
    pub sign: f64,
    pub n_preferences: usize,
    /// Responses per token or preference.
    pub n_responses: usize,
    pub n_consistency: usize,
}

impl Default for MetricsBlock {
    fn default() -> Self {
        MetricsBlock {
            m: 100,
            n_rows: 2,
            sign: 1.0,
            n_preferences: 11,
            n_responses: 300,
            n_consistency: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsBlock {
    /// Input JSONL for `label`; for `train-policy` it replaces the generated
    /// offline dataset and must carry a `style` on every record.
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    /// Defaults to `<out>/ensemble.json`.
    pub ensemble: Option<PathBuf>,
    /// Defaults to `<out>/policy.json`.
    pub policy: Option<PathBuf>,
}

impl Default for PathsBlock {
    fn default() -> Self {
        PathsBlock {
            input: None,
            out: PathBuf::from("out"),
            ensemble: None,
            policy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k: usize,
    pub m_utilities: usize,
    pub mu: f64,
    pub epsilon: f64,
    pub seed: Option<u64>,
    pub token: String,
    /// Prompt text used by `infer`.
    pub prompt: String,
    pub ensemble: EnsembleBlock,
    pub simulator: SimulatorBlock,
    pub metrics: MetricsBlock,
    pub paths: PathsBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = EnsembleConfig::default();
        RunConfig {
            k: d.k,
            m_utilities: d.m_utilities,
            mu: d.mu,
            epsilon: d.epsilon,
            seed: None,
            token: DEFAULT_TOKEN.to_string(),
            prompt: String::new(),
            ensemble: EnsembleBlock::default(),
            simulator: SimulatorBlock::default(),
            metrics: MetricsBlock::default(),
            paths: PathsBlock::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }

    /// Applies flags and `UCMOA_SEED`: `--seed` > `UCMOA_SEED` > config seed > 0.
    pub fn resolve(mut self, cli: &Cli, env_seed: Option<&str>) -> Result<Self> {
        let env_seed = env_seed
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::Config(format!("{SEED_ENV}='{s}': {e}")))
            })
            .transpose()?;
        self.seed = Some(cli.seed.or(env_seed).or(self.seed).unwrap_or(0));
        if let Some(out) = &cli.out {
            self.paths.out = out.clone();
        }
        if let Command::TrainPolicy {
            online_iters: Some(n),
        } = cli.command
        {
            self.simulator.online_iters = n;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble_config().validate()?;
        if self.m_utilities > 26 {
            return Err(Error::Config(format!(
                "{} utilities cannot be letter-encoded (maximum 26)",
                self.m_utilities
            )));
        }
        if self.token.is_empty() {
            return Err(Error::Config("token must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.simulator.online.tau) {
            return Err(Error::Config(format!("tau must lie in [0,1], got {}", self.simulator.online.tau)));
        }
        if self.metrics.sign != 1.0 && self.metrics.sign != -1.0 {
            return Err(Error::Config(format!("metrics.sign must be 1 or -1, got {}", self.metrics.sign)));
        }
        if self.metrics.n_preferences == 0 || self.metrics.n_responses == 0 || self.metrics.n_consistency == 0 {
            return Err(Error::Config("metric sample counts must be positive".into()));
        }
        for path in [&self.simulator.env, &self.paths.input].into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::Config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        let b = &self.ensemble;
        EnsembleConfig {
            k: self.k,
            m_utilities: self.m_utilities,
            mu: self.mu,
            epsilon: self.epsilon,
            steps: b.steps,
            batch: b.batch,
            pair_batch: b.pair_batch,
            learning_rate: b.learning_rate,
            seed: self.seed(),
            hidden: b.hidden.clone(),
            maximize_diversity: b.maximize_diversity,
            standardize_range: b.standardize_range,
            probe_size: b.probe_size,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let s = &self.simulator;
        PipelineConfig {
            n_offline: s.n_offline,
            offline_epochs: s.offline_epochs,
            learning_rate: s.learning_rate,
            online_iters: s.online_iters,
            online: s.online.clone(),
            n_stat: s.n_stat,
            token: self.token.clone(),
            seed: self.seed(),
        }
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.paths.out.join(name)
    }

    fn ensemble_path(&self) -> PathBuf {
        self.paths.ensemble.clone().unwrap_or_else(|| self.out_file("ensemble.json"))
    }

    fn policy_path(&self) -> PathBuf {
        self.paths.policy.clone().unwrap_or_else(|| self.out_file("policy.json"))
    }

    fn load_env(&self) -> Result<SynthEnv> {
        let env = match &self.simulator.env {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str::<SynthEnv>(&text).map_err(|e| Error::Parse {
                    location: format!("{}: line {}, column {}", path.display(), e.line(), e.column()),
                    message: e.to_string(),
                })?
            }
            None => SynthEnv::bundled_two_objective(),
        };
        if env.k() != self.k {
            return Err(Error::shape("environment objectives", self.k, env.k()));
        }
        Ok(env)
    }

    fn load_ensemble(&self) -> Result<UtilityEnsemble> {
        let path = self.ensemble_path();
        let file = File::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        UtilityEnsemble::load(BufReader::new(file), Some(self.k))
    }

    fn load_policy(&self) -> Result<PolicyArtifact> {
        let path = self.policy_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}: line {}, column {}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })
    }
}

/// Everything `train-policy` leaves behind for `infer` and `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub token: String,
    /// Reward range of the offline data; it fixes normalization downstream.
    pub bounds: RunningBounds,
    /// Offline stage first, then one entry per online iteration.
    pub stages: Vec<StageResult>,
}

#[derive(Serialize)]
struct PercentileSnapshot<'a> {
    bounds: &'a RunningBounds,
    table: &'a crate::reward_stats::PercentileTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOutput {
    pub index: usize,
    pub letter: char,
    pub prompt: String,
}

#[derive(Serialize)]
struct ParetoArm {
    arm: String,
    hypervolume: Option<f64>,
    points: Vec<crate::policy_sim::SweepPoint>,
}

#[derive(Serialize)]
struct ParetoReport {
    seed: u64,
    reference: Vec<f64>,
    arms: Vec<ParetoArm>,
}

fn arm_name(iter: usize) -> String {
    if iter == 0 {
        "offline".to_string()
    } else {
        format!("online-{iter}")
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(std::io::Error::from)?;
    for row in rows {
        w.write_record(row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}_{i}"))
}

fn fmt_all(values: &[f64]) -> impl Iterator<Item = String> + '_ {
    values.iter().map(|v| v.to_string())
}

pub fn cmd_train_utilities(config: &RunConfig) -> Result<String> {
    let outcome = train_ensemble_logged(&config.ensemble_config())?;
    let mut w = create(&config.ensemble_path())?;
    outcome.ensemble.save(&mut w)?;
    w.flush()?;

    let header: Vec<String> = ["step", "member", "l_val", "l_grad", "objective"].map(String::from).into();
    let rows: Vec<Vec<String>> = outcome
        .log
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.member.to_string(),
                r.l_val.to_string(),
                r.l_grad.to_string(),
                r.objective.to_string(),
            ]
        })
        .collect();
    write_csv(&config.out_file("train_log.csv"), &header, &rows)?;
    Ok(format!(
        "trained {} utilities over {} sweeps; min probe discrepancy {:.4e} -> {:.4e}",
        outcome.ensemble.m(),
        config.ensemble.steps,
        outcome.initial_probe_discrepancy,
        outcome.final_probe_discrepancy
    ))
}

fn read_input(config: &RunConfig) -> Result<Vec<crate::labeler::RawSample>> {
    let path = config
        .paths
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("paths.input is required".into()))?;
    read_raw_jsonl(BufReader::new(File::open(path)?), config.k)
}

pub fn cmd_label(config: &RunConfig) -> Result<String> {
    let ensemble = config.load_ensemble()?;
    let samples = read_input(config)?;
    let bounds = RunningBounds::from_samples(samples.iter().map(|s| s.rewards.as_slice()))?;
    let (labeled, table) = label_dataset(&samples, &ensemble, &bounds, &config.token)?;

    let mut w = create(&config.out_file("labeled.jsonl"))?;
    write_jsonl(&mut w, &labeled)?;
    w.flush()?;
    write_json(
        &config.out_file("percentiles.json"),
        &PercentileSnapshot {
            bounds: &bounds,
            table: &table,
        },
    )?;

    let hist = label_histogram(&labeled, ensemble.m());
    let parts = hist
        .iter()
        .enumerate()
        .map(|(i, c)| Ok(format!("{}={c}", index_to_letter(i)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(format!("labeled {} records; histogram {}", labeled.len(), parts.join(" ")))
}

pub fn cmd_train_policy(config: &RunConfig) -> Result<String> {
    let env = config.load_env()?;
    let ensemble = config.load_ensemble()?;
    let pipeline = config.pipeline_config();
    let run = if config.paths.input.is_some() {
        let raw = read_input(config)?;
        let bounds = RunningBounds::from_samples(raw.iter().map(|s| s.rewards.as_slice()))?;
        run_pipeline_from_samples(&env, &ensemble, &raw, bounds, &pipeline)?
    } else {
        run_pipeline(&env, &ensemble, &pipeline)?
    };

    let mut w = create(&config.out_file("offline_labeled.jsonl"))?;
    write_jsonl(&mut w, &run.labeled)?;
    w.flush()?;

    let m = ensemble.m();
    let header: Vec<String> = ["iter", "accept_rate"]
        .map(String::from)
        .into_iter()
        .chain(numbered("mean_utility_token", m))
        .collect();
    let rows: Vec<Vec<String>> = run
        .stages
        .iter()
        .map(|s| {
            [s.iter.to_string(), s.accept_rate.to_string()]
                .into_iter()
                .chain(fmt_all(&s.mean_utility_per_token))
                .collect()
        })
        .collect();
    write_csv(&config.out_file("stats.csv"), &header, &rows)?;

    let rates: Vec<String> = run.stages.iter().map(|s| format!("{:.3}", s.accept_rate)).collect();
    write_json(
        &config.policy_path(),
        &PolicyArtifact {
            token: config.token.clone(),
            bounds: run.bounds,
            stages: run.stages,
        },
    )?;
    Ok(format!(
        "trained policy: {} offline samples, {} online iteration(s), accept rates [{}]",
        run.labeled.len(),
        config.simulator.online_iters,
        rates.join(", ")
    ))
}

pub fn cmd_infer(config: &RunConfig, preference: &str) -> Result<InferOutput> {
    let w = PreferenceVector::parse(preference)?;
    let ensemble = config.load_ensemble()?;
    let policy = config.load_policy()?;
    let norm = policy.bounds.normalization()?;
    let (index, prompt) = build_inference_prompt(
        &config.prompt,
        &w,
        &RewardBounds::from(&policy.bounds),
        &ensemble,
        &norm,
        &policy.token,
    )?;
    let out = InferOutput {
        index,
        letter: index_to_letter(index)?,
        prompt,
    };
    write_json(&config.out_file("infer.json"), &out)?;
    Ok(out)
}

pub fn cmd_eval(config: &RunConfig, metric: Metric) -> Result<String> {
    let env = config.load_env()?;
    let ensemble = config.load_ensemble()?;
    let artifact = config.load_policy()?;
    if artifact.stages.is_empty() {
        return Err(Error::Data("policy file has no stages".into()));
    }
    let run = crate::policy_sim::PipelineRun {
        bounds: artifact.bounds.clone(),
        labeled: Vec::new(),
        stages: artifact.stages.clone(),
        buffer: crate::policy_sim::OnlineBuffer::new(1)?,
    };
    match metric {
        Metric::Pareto => eval_pareto(config, &env, &ensemble, &run),
        Metric::Constraints | Metric::Variance => eval_distributional(config, &env, &run),
        Metric::Consistency => eval_consistency(config, &env, &ensemble, &run),
    }
}

fn eval_pareto(
    config: &RunConfig,
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    run: &crate::policy_sim::PipelineRun,
) -> Result<String> {
    let m = &config.metrics;
    let sweeps = sweep_stages(run, env, ensemble, m.n_preferences, m.n_responses, config.seed())?;
    let reference = env.reference_point();
    let k = env.k();

    let header: Vec<String> = std::iter::once("arm".to_string())
        .chain(numbered("preference", k))
        .chain(std::iter::once("token".to_string()))
        .chain(numbered("reward", k))
        .collect();
    let mut rows = Vec::new();
    let mut arms = Vec::new();
    for (stage, points) in run.stages.iter().zip(sweeps) {
        let arm = arm_name(stage.iter);
        for p in &points {
            rows.push(
                std::iter::once(arm.clone())
                    .chain(fmt_all(&p.preference))
                    .chain(std::iter::once(p.token.to_string()))
                    .chain(fmt_all(&p.mean_reward))
                    .collect(),
            );
        }
        let hypervolume = if k == 2 {
            Some(sweep_hypervolume(&points, &reference)?)
        } else {
            None
        };
        arms.push(ParetoArm { arm, hypervolume, points });
    }
    write_csv(&config.out_file("pareto.csv"), &header, &rows)?;

    let summary: Vec<String> = arms
        .iter()
        .map(|a| match a.hypervolume {
            Some(hv) => format!("{} hv={hv:.4}", a.arm),
            None => a.arm.clone(),
        })
        .collect();
    if k == 2 {
        let series: Vec<(String, Vec<[f64; 2]>)> = arms
            .iter()
            .map(|a| {
                let mut pts: Vec<[f64; 2]> = a.points.iter().map(|p| [p.mean_reward[0], p.mean_reward[1]]).collect();
                pts.sort_by(|x, y| x[0].total_cmp(&y[0]).then(x[1].total_cmp(&y[1])));
                (a.arm.clone(), pts)
            })
            .collect();
        let mut w = create(&config.out_file("pareto.svg"))?;
        w.write_all(polyline_svg(&series, "reward 0", "reward 1").as_bytes())?;
        w.flush()?;
    }
    write_json(
        &config.out_file("pareto.json"),
        &ParetoReport {
            seed: config.seed(),
            reference,
            arms,
        },
    )?;
    Ok(format!("pareto sweep: {}", summary.join(", ")))
}

/// Token-conditioned return samples of one stage policy.
fn stage_sample_sets(
    stage: &StageResult,
    env: &SynthEnv,
    n: usize,
    seed: u64,
) -> Result<Vec<PolicySampleSet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_METRIC_SAMPLES + stage.iter as u64);
    (0..stage.policy.m_tokens())
        .map(|t| {
            let samples = (0..n)
                .map(|_| {
                    let style = stage.policy.sample_style(Some(t), &mut rng)?;
                    env.sample_response(style, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            PolicySampleSet::new(format!("{}/token-{t}", arm_name(stage.iter)), samples)
        })
        .collect()
}

fn eval_distributional(config: &RunConfig, env: &SynthEnv, run: &crate::policy_sim::PipelineRun) -> Result<String> {
    let m = &config.metrics;
    let sets = run
        .stages
        .iter()
        .map(|s| stage_sample_sets(s, env, m.n_responses, config.seed()))
        .collect::<Result<Vec<_>>>()?;
    // One shared pool, so every arm is scored against the same constraints.
    let pool: Vec<&[f64]> = sets
        .iter()
        .flatten()
        .flat_map(|p| p.samples.iter().map(Vec::as_slice))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
    rng.set_stream(STREAM_METRIC_PREFS);
    let constraints = gen_constraints(m.m, m.n_rows, &pool, &mut rng)?;
    let weights = gen_variance_weights(m.m, env.k(), m.sign, &mut rng)?;

    let mut rows = Vec::new();
    let mut last = None;
    for (stage, policies) in run.stages.iter().zip(&sets) {
        let report = MetricsReport {
            constraint_satisfaction: constraint_satisfaction(policies, &constraints)?,
            variance_objective: variance_objective(policies, &weights)?,
            m: m.m,
            seed: config.seed(),
        };
        rows.push(vec![
            arm_name(stage.iter),
            report.constraint_satisfaction.to_string(),
            report.variance_objective.to_string(),
        ]);
        last = Some(report);
    }
    let header: Vec<String> = ["arm", "constraint_satisfaction", "variance_objective"].map(String::from).into();
    write_csv(&config.out_file("metrics.csv"), &header, &rows)?;
    let report = last.expect("at least one stage");
    write_json(&config.out_file("metrics.json"), &report)?;
    Ok(format!(
        "final policy: constraint satisfaction {:.4}, variance objective {:.4}",
        report.constraint_satisfaction, report.variance_objective
    ))
}

fn eval_consistency(
    config: &RunConfig,
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    run: &crate::policy_sim::PipelineRun,
) -> Result<String> {
    let tokens: Vec<usize> = (0..ensemble.m()).collect();
    let report = consistency_report(run, env, ensemble, &tokens, config.metrics.n_consistency, config.seed())?;
    let header: Vec<String> = ["token", "best_utility"]
        .map(String::from)
        .into_iter()
        .chain(numbered("mean", ensemble.m()))
        .collect();
    let rows: Vec<Vec<String>> = report
        .iter()
        .map(|r| {
            [r.token.to_string(), r.best_utility.to_string()]
                .into_iter()
                .chain(fmt_all(&r.means))
                .collect()
        })
        .collect();
    write_csv(&config.out_file("consistency.csv"), &header, &rows)?;
    write_json(&config.out_file("consistency.json"), &report)?;
    let hits = report.iter().filter(|r| r.consistent()).count();
    Ok(format!("consistency: {hits}/{} tokens score highest under their own utility", report.len()))
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const SVG_MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Standalone SVG line chart: one polyline per series, axis labels, legend.
pub fn polyline_svg(series: &[(String, Vec<[f64; 2]>)], x_label: &str, y_label: &str) -> String {
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in all {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let d = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
        (lo - d, hi + d)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let sx = |x: f64| SVG_MARGIN + (x - x0) / (x1 - x0) * (SVG_W - 2.0 * SVG_MARGIN);
    let sy = |y: f64| SVG_H - SVG_MARGIN - (y - y0) / (y1 - y0) * (SVG_H - 2.0 * SVG_MARGIN);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    );
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    let (left, right, top, bottom) = (SVG_MARGIN, SVG_W - SVG_MARGIN, SVG_MARGIN, SVG_H - SVG_MARGIN);
    s += &format!("<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" stroke=\"black\"/>\n");
    s += &format!("<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{left}\" y2=\"{top}\" stroke=\"black\"/>\n");
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{xv:.2}</text>\n",
            sx(xv),
            bottom + 16.0
        );
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{yv:.2}</text>\n",
            left - 6.0,
            sy(yv) + 4.0
        );
    }
    s += &format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        SVG_W / 2.0,
        SVG_H - 15.0,
        escape(x_label)
    );
    s += &format!(
        "<text x=\"15\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 15 {:.1})\">{}</text>\n",
        SVG_H / 2.0,
        SVG_H / 2.0,
        escape(y_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1]))).collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"><title>{}</title></polyline>\n",
            coords.join(" "),
            escape(name)
        );
        let ly = top + 16.0 * i as f64;
        s += &format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            right - 90.0,
            escape(name)
        );
    }
    s += "</svg>\n";
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Runs one parsed invocation and returns the line to print on success.
pub fn run(cli: &Cli, env_seed: Option<&str>) -> Result<String> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = base.resolve(cli, env_seed)?;
    match &cli.command {
        Command::TrainUtilities => cmd_train_utilities(&config),
        Command::Label => cmd_label(&config),
        Command::TrainPolicy { .. } => cmd_train_policy(&config),
        Command::Infer { preference } => {
            let out = cmd_infer(&config, preference)?;
            Ok(serde_json::to_string(&out).expect("plain struct serializes"))
        }
        Command::Eval { metric } => cmd_eval(&config, *metric),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("ucmoa").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn seed_precedence() {
        let cfg = RunConfig {
            seed: Some(5),
            ..RunConfig::default()
        };
        let flag = parse(&["--seed", "9", "train-utilities"]);
        let none = parse(&["train-utilities"]);
        assert_eq!(cfg.clone().resolve(&flag, Some("7")).unwrap().seed(), 9);
        assert_eq!(cfg.clone().resolve(&none, Some("7")).unwrap().seed(), 7);
        assert_eq!(cfg.resolve(&none, None).unwrap().seed(), 5);
        assert_eq!(RunConfig::default().resolve(&none, None).unwrap().seed(), 0);
        assert!(RunConfig::default().resolve(&none, Some("x")).is_err());
    }

    #[test]
    fn flags_override_config() {
        let cli = parse(&["--out", "elsewhere", "train-policy", "--online-iters", "0"]);
        let cfg = RunConfig::default().resolve(&cli, None).unwrap();
        assert_eq!(cfg.paths.out, PathBuf::from("elsewhere"));
        assert_eq!(cfg.simulator.online_iters, 0);
        assert_eq!(cfg.policy_path(), PathBuf::from("elsewhere/policy.json"));
    }

    #[test]
    fn config_validation() {
        let none = parse(&["train-utilities"]);
        let one = RunConfig {
            m_utilities: 1,
            ..RunConfig::default()
        };
        assert_eq!(one.resolve(&none, None).unwrap_err().exit_code(), 1);
        let mut missing = RunConfig::default();
        missing.paths.input = Some(PathBuf::from("/nonexistent/input.jsonl"));
        assert!(matches!(missing.resolve(&none, None), Err(Error::Config(_))));
        let partial: RunConfig = serde_json::from_str(r#"{"m_utilities": 5, "ensemble": {"steps": 3}}"#).unwrap();
        assert_eq!(partial.m_utilities, 5);
        assert_eq!(partial.ensemble.steps, 3);
        assert_eq!(partial.ensemble.hidden, EnsembleConfig::default().hidden);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let series = vec![
            ("offline".to_string(), vec![[0.0, 1.0], [1.0, 0.0]]),
            ("online-1".to_string(), vec![[0.2, 1.1], [1.1, 0.2]]),
        ];
        let svg = polyline_svg(&series, "reward 0", "reward 1");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">reward 0<") && svg.contains(">reward 1<"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
