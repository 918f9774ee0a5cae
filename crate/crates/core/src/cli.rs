//! Command-line entry points.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::agent::ActMode;
use crate::checkpoint::Checkpoint;
use crate::config::{load_config, ExperimentConfig};
use crate::discriminator::PairBatch;
use crate::env::{collect_demonstrations, pattern_for_env, DistractedPointMass, PointMassParams, ScriptedExpert};
use crate::episode::EpisodeRecord;
use crate::error::{Error, Result};
use crate::oracle::{run_suite, Suite};
use crate::rng::RandomSource;
use crate::trainer::{
    self, episode_mask_iou, episode_tensors, evaluate_policy, reconstruction_panel, Models, RunOutputs, ScoreAnchors,
};
use crate::viz::{self, AGENT_BORDER, EXPERT_BORDER};
use crate::world_model::BranchState;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "semail",
    version,
    about = "Adversarial imitation from pixels with a separated world model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted-expert demonstrations.
    CollectExpert(CollectArgs),
    /// Train an agent from demonstrations.
    Train(TrainArgs),
    /// Evaluate a checkpoint with deterministic rollouts.
    Eval(EvalArgs),
    /// Run the verification oracles.
    Verify(VerifyArgs),
    /// Render reconstruction panels, mask IoU and the discriminator series.
    Visualize(VisualizeArgs),
}

/// Config file plus `--key value` overrides applied in order.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--key value` pairs over the config file; later pairs win.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => ExperimentConfig::default(),
        };
        apply_overrides(&mut cfg, &self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies `--key value` (or `--key=value`) pairs.
pub fn apply_overrides(cfg: &mut ExperimentConfig, args: &[String]) -> Result<()> {
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let body = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--key value`, found `{flag}`")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag `{flag}` is missing its value")))?;
                (body.to_string(), v.clone())
            }
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long, default_value = "pointmass")]
    pub env: String,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub demo_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    None,
    #[value(name = "no_act")]
    NoAct,
    #[value(name = "no_bor")]
    NoBor,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub demo_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    pub ablation: Ablation,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the pattern the checkpoint was trained on.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Theorem,
    Bound,
    Kl,
    Grads,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
    /// Instances per suite; each suite has its own default.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Demonstration set description written next to the episode files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub env: String,
    pub seed: u64,
    pub n: usize,
    pub files: Vec<String>,
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub image_size: usize,
    pub max_steps: usize,
    pub action_repeat: usize,
    pub step_size: f64,
    pub background_velocity: f64,
    pub expert_gain: f64,
}

pub fn demo_file_name(i: usize) -> String {
    format!("demo_{i:04}.episode")
}

pub fn collect_expert(args: &CollectArgs, out: &mut dyn Write) -> Result<DemoManifest> {
    if args.n == 0 {
        return Err(Error::Invalid("--n must be at least 1".into()));
    }
    let pattern = pattern_for_env(&args.env)?;
    let cfg = args.config.resolve()?;
    let params = PointMassParams::from_config(&cfg, pattern);
    let mut env = DistractedPointMass::new(params);
    let expert = ScriptedExpert { gain: cfg.expert_gain };
    let demos = collect_demonstrations(&mut env, &expert, args.n, &mut RandomSource::new(args.seed))?;
    let dir = &args.demo_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        let name = demo_file_name(i);
        d.save(&dir.join(&name))?;
        files.push(name);
    }
    let returns: Vec<f64> = demos.iter().map(EpisodeRecord::eval_return).collect();
    let manifest = DemoManifest {
        env: args.env.clone(),
        seed: args.seed,
        n: args.n,
        files,
        mean_return: trainer::mean_std(&returns).0,
        returns,
        image_size: cfg.image_size,
        max_steps: cfg.max_steps,
        action_repeat: cfg.action_repeat,
        step_size: cfg.step_size,
        background_velocity: cfg.background_velocity,
        expert_gain: cfg.expert_gain,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    writeln!(
        out,
        "wrote {} demonstrations to {} (mean return {:.3})",
        args.n,
        dir.display(),
        manifest.mean_return
    )
    .map_err(|e| Error::io("<stdout>", e))?;
    Ok(manifest)
}

/// Loads the first `n` demonstrations listed in the directory's manifest.
pub fn load_demos(dir: &Path, n: usize) -> Result<Vec<EpisodeRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DemoManifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.files.len() < n {
        return Err(Error::Invalid(format!(
            "{} lists {} demonstrations, config asks for {n}",
            path.display(),
            manifest.files.len()
        )));
    }
    manifest.files[..n]
        .iter()
        .map(|f| EpisodeRecord::load(&dir.join(f)))
        .collect()
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    match args.ablation {
        Ablation::None => {}
        Ablation::NoAct => cfg.no_act = true,
        Ablation::NoBor => cfg.no_bor = true,
    }
    cfg.validate()?;
    let demos = load_demos(&args.demo_dir, cfg.num_expert_demos)?;
    let outputs = RunOutputs { dir: args.out.clone() };
    let (_, summary) = trainer::run(cfg, demos, Some(&outputs))?;
    let last = summary.evaluations.last();
    writeln!(
        out,
        "trained {} iterations; final eval return {}; metrics in {}",
        summary.iterations,
        last.map(|e| format!("{:.3} ± {:.3}", e.mean_return, e.std_return))
            .unwrap_or_else(|| "n/a".into()),
        outputs.metrics().display()
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn load_models(path: &Path) -> Result<(ExperimentConfig, Models)> {
    Models::from_checkpoint(&Checkpoint::load(path)?)
}

fn env_params(cfg: &ExperimentConfig, env: Option<&str>) -> Result<PointMassParams> {
    let pattern = match env {
        Some(name) => pattern_for_env(name)?,
        None => trainer::agent_pattern(cfg),
    };
    Ok(PointMassParams::from_config(cfg, pattern))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized: f64,
    pub anchors: ScoreAnchors,
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    if args.episodes == 0 {
        return Err(Error::Invalid("--episodes must be at least 1".into()));
    }
    let (cfg, models) = load_models(&args.checkpoint)?;
    let params = env_params(&cfg, args.env.as_deref())?;
    let mut env = DistractedPointMass::new(params.clone());
    let stats = evaluate_policy(&models, &mut env, args.episodes, &mut RandomSource::new(args.seed))?;
    let anchors = ScoreAnchors::measure(&params, cfg.expert_gain, args.episodes, args.seed)?;
    let report = EvalReport {
        mean_return: stats.mean_return,
        std_return: stats.std_return,
        normalized: anchors.normalize(stats.mean_return),
        anchors,
    };
    writeln!(
        out,
        "eval return: {:.3} ± {:.3} over {} episodes\nnormalized score: {:.3} (random {:.3}, expert {:.3})",
        report.mean_return, report.std_return, args.episodes, report.normalized, anchors.random, anchors.expert
    )
    .map_err(|e| Error::io("<stdout>", e))?;
    Ok(report)
}

/// Runs the requested suites, writing one JSON line per check. Returns
/// whether every check passed.
pub fn verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<bool> {
    let suites: Vec<Suite> = match args.suite {
        SuiteArg::Theorem => vec![Suite::Theorem],
        SuiteArg::Bound => vec![Suite::Bound],
        SuiteArg::Kl => vec![Suite::Kl],
        SuiteArg::Grads => vec![Suite::Grads],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let mut all_pass = true;
    for suite in suites {
        let trials = args.trials.unwrap_or_else(|| suite.default_trials());
        for record in run_suite(suite, trials, args.seed)? {
            all_pass &= record.pass;
            writeln!(out, "{}", record.to_json_line()).map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(all_pass)
}

/// Per-step discriminator probability along an episode.
pub fn discriminator_series(models: &Models, ep: &EpisodeRecord, rng: &mut RandomSource) -> Result<Vec<f64>> {
    let (obs, act) = episode_tensors(ep)?;
    let states = models.world.filter_task(&obs, &act, rng)?;
    let z = BranchState::cat(&states)?;
    let actions = act.squeeze(0)?;
    let p = models.discriminator.probability(&PairBatch::new(&z, &actions)?)?;
    Ok(p.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisualSummary {
    pub agent_mask_iou: f64,
    pub expert_mask_iou: f64,
    pub agent_mean_p_e: f64,
    pub expert_mean_p_e: f64,
}

pub fn visualize(args: &VisualizeArgs, out: &mut dyn Write) -> Result<VisualSummary> {
    let (cfg, models) = load_models(&args.checkpoint)?;
    let params = env_params(&cfg, args.env.as_deref())?;
    let dir = &args.out;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = RandomSource::new(args.seed);
    let mut env = DistractedPointMass::new(params);

    let mut agent_truth = Vec::new();
    let agent = models.rollout(&mut env, ActMode::Eval, &mut rng, |env| {
        agent_truth.push(env.ground_truth_mask()?.mask);
        Ok(())
    })?;
    let expert_policy = ScriptedExpert { gain: cfg.expert_gain };
    let mut expert_truth = Vec::new();
    let expert = crate::env::run_episode(&mut env, &mut rng, true, |env, _, _| {
        expert_truth.push(env.ground_truth_mask()?.mask);
        Ok(expert_policy.act(env))
    })?;

    let mut summary = VisualSummary {
        agent_mask_iou: 0.0,
        expert_mask_iou: 0.0,
        agent_mean_p_e: 0.0,
        expert_mean_p_e: 0.0,
    };
    for (name, ep, truth, border) in [
        ("agent", &agent, &agent_truth, AGENT_BORDER),
        ("expert", &expert, &expert_truth, EXPERT_BORDER),
    ] {
        reconstruction_panel(&models.world, ep, border, &mut rng)?.save(&dir.join(format!("{name}_panel.png")))?;
        let iou = episode_mask_iou(&models.world, ep, truth, &mut rng)?;
        let series = discriminator_series(&models, ep, &mut rng)?;
        viz::plot_series(&series, 320, 120).save(&dir.join(format!("{name}_p_e.png")))?;
        let mean_p = trainer::mean_std(&series).0;
        if name == "agent" {
            summary.agent_mask_iou = iou;
            summary.agent_mean_p_e = mean_p;
        } else {
            summary.expert_mask_iou = iou;
            summary.expert_mean_p_e = mean_p;
        }
    }
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::format("summary", e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    writeln!(
        out,
        "mask IoU: agent {:.3}, expert {:.3}; mean P_E: agent {:.3}, expert {:.3}",
        summary.agent_mask_iou, summary.expert_mask_iou, summary.agent_mean_p_e, summary.expert_mean_p_e
    )
    .map_err(|e| Error::io("<stdout>", e))?;
    Ok(summary)
}

/// Exit code for an error returned by a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let result = match &cli.command {
        Command::CollectExpert(a) => collect_expert(a, out).map(|_| EXIT_OK),
        Command::Train(a) => train(a, out).map(|_| EXIT_OK),
        Command::Eval(a) => eval(a, out).map(|_| EXIT_OK),
        Command::Verify(a) => verify(a, out).map(|ok| if ok { EXIT_OK } else { EXIT_VERIFY }),
        Command::Visualize(a) => visualize(a, out).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_last_writer_wins() {
        let mut cfg = ExperimentConfig::default();
        let args: Vec<String> = ["--batch", "8", "--seed=3", "--batch", "4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        apply_overrides(&mut cfg, &args).unwrap();
        assert_eq!((cfg.batch, cfg.seed), (4, 3));
    }

    #[test]
    fn unknown_and_dangling_flags_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(apply_overrides(&mut cfg, &["--bogus".into(), "1".into()]).is_err());
        assert!(apply_overrides(&mut cfg, &["--batch".into()]).is_err());
        assert!(apply_overrides(&mut cfg, &["batch".into(), "1".into()]).is_err());
    }

    #[test]
    fn parser_routes_trailing_overrides() {
        let cli = Cli::try_parse_from(["semail", "train", "--demo-dir", "d", "--out", "o", "--batch", "2"]).unwrap();
        match cli.command {
            Command::Train(a) => assert_eq!(a.config.overrides, vec!["--batch", "2"]),
            other => panic!("{other:?}"),
        }
    }
}
