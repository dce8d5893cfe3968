//! `gridrl`: pretrain a reference policy, fine-tune it with GRPO, evaluate,
//! sweep temperatures, compare runs and render grids.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use gridrl::numerics::Rng;
use gridrl::policy::data::heldout_set;
use gridrl::policy::{checkpoint, sample_rollout, PolicyParams, PromptSet, SamplingOptions};
use gridrl::rewards::{score, EntropyRewardMode};
use gridrl::trainer::eval::write_sweep;
use gridrl::trainer::{self, compare, parse_task_weights, TrainConfig};
use gridrl::{Error, Result};

#[derive(Parser)]
#[command(name = "gridrl", version, about = "GRPO with similarity-aware reweighting on token grids")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum-likelihood pretraining of the reference policy.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to write.
        #[arg(long, default_value = "reference.stg")]
        out: PathBuf,
    },
    /// GRPO fine-tuning from a reference checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        reference: PathBuf,
        /// Run directory (metrics.csv, evals.csv, final.stg, ...).
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task mean reward and entropy of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt set (JSON lines); defaults to the held-out set of the active tasks.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Mean entropy and reward across sampling temperatures.
    SweepTemp {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated, ascending.
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.8,1.0,1.2,1.5")]
        temperatures: Vec<f64>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        /// CSV table to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Terminal reward, entropy drift, KL and AUC of several runs.
    Compare {
        /// metrics.csv files (or run directories containing one).
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_txt: Option<PathBuf>,
    },
    /// Sample one grid per prompt and write PPM images.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Number of prompts to render.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named base configuration, applied before --config.
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    set: Overrides,
}

macro_rules! overrides {
    ($($field:ident: $ty:ty $(=> $parse:path)?),* $(,)?) => {
        #[derive(Args, Default)]
        struct Overrides {
            $(
                #[arg(long = stringify!($field), value_name = "V", help_heading = "Config overrides", allow_negative_numbers = true $(, value_parser = $parse)?)]
                $field: Option<$ty>,
            )*
        }

        impl Overrides {
            fn apply(&self, map: &mut Map<String, Value>) {
                $(
                    if let Some(v) = &self.$field {
                        map.insert(stringify!($field).into(), serde_json::to_value(v).expect("override serializes"));
                    }
                )*
            }
        }
    };
}

fn parse_mode(s: &str) -> Result<EntropyRewardMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_weights(s: &str) -> Result<[f64; 4], String> {
    parse_task_weights(s).map_err(|e| e.to_string())
}

fn parse_bounds(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("{p:?} is not a number")))
        .collect::<Result<_, _>>()?;
    <[f64; 2]>::try_from(v).map_err(|_| "expected lo,hi".to_string())
}

overrides! {
    seed: u64,
    grid_h: usize,
    grid_w: usize,
    vocab: usize,
    code_dim: usize,
    categories: usize,
    intra_noise: f64,
    codebook_seed: u64,
    hidden: usize,
    group_size: usize,
    batch_size: usize,
    learning_rate: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    kl_beta: f64,
    entropy_lambda: f64,
    clip_eps: f64,
    temperature: f64,
    cfg_scale: f64,
    total_steps: usize,
    inner_epochs: usize,
    grad_accum: usize,
    max_grad_norm: f64,
    reweight_advantage: bool,
    reweight_kl: bool,
    entropy_reward_mode: EntropyRewardMode => parse_mode,
    entropy_loss_ablation: bool,
    drop_kl_on_zero_std: bool,
    counting_clamp: bool,
    beta_clip_bounds: [f64; 2] => parse_bounds,
    task_weights: [f64; 4] => parse_weights,
    eval_every: usize,
    eval_prompts: usize,
    eval_samples: usize,
    eval_seed: u64,
    render_every: usize,
    pretrain_steps: usize,
    pretrain_batch: usize,
    pretrain_lr: f64,
    label_noise: f64,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.preset {
            Some(name) => TrainConfig::preset(name)?,
            None => TrainConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            let file: Value = serde_json::from_str(&text).map_err(|e| Error::arg(format!("{}: {e}", path.display())))?;
            cfg = merge(&cfg, file)?;
        }
        let mut set = Map::new();
        self.set.apply(&mut set);
        let cfg = merge(&cfg, Value::Object(set))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &TrainConfig, patch: Value) -> Result<TrainConfig> {
    let Value::Object(patch) = patch else {
        return Err(Error::arg("config must be a JSON object"));
    };
    let Value::Object(mut map) = serde_json::to_value(base)? else {
        unreachable!("config serializes to an object")
    };
    map.extend(patch);
    TrainConfig::from_json(&Value::Object(map).to_string())
}

fn load_prompts(cfg: &TrainConfig, path: Option<&Path>) -> Result<PromptSet> {
    match path {
        Some(p) => PromptSet::load(p),
        None => Ok(heldout_set(&cfg.active_tasks(), cfg.eval_prompts, cfg.categories, cfg.grid(), cfg.eval_seed)),
    }
}

fn load_checkpoint(cfg: &TrainConfig, path: &Path) -> Result<PolicyParams> {
    let params = checkpoint::load(path)?;
    if *params.dims() != cfg.dims() {
        return Err(Error::arg(format!(
            "{} has architecture {:?}, config expects {:?}",
            path.display(),
            params.dims(),
            cfg.dims()
        )));
    }
    Ok(params)
}

fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("metrics.csv")
    } else {
        p.to_path_buf()
    }
}

fn run_name(p: &Path) -> String {
    let p = if p.is_dir() { p } else { p.parent().unwrap_or(p) };
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { cfg, out } => {
            let cfg = cfg.resolve()?;
            let rep = trainer::run_pretrain(&cfg, Some(&out))?;
            if let Some(last) = rep.losses.last() {
                println!("final loss {last:.6}");
            }
            println!("held-out counting reward {:.6}", rep.heldout_counting);
            println!("wrote {}", out.display());
        }
        Command::Train { cfg, reference, out } => {
            let cfg = cfg.resolve()?;
            let reference = load_checkpoint(&cfg, &reference)?;
            let run = trainer::run_rl(&cfg, &reference, Some(&out))?;
            for e in run.evals.iter().filter(|e| e.task == "overall") {
                println!("step {:>6}  eval reward {:.4}  entropy {:.4}", e.step, e.mean_reward, e.mean_entropy);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { cfg, checkpoint, prompts, samples } => {
            let cfg = cfg.resolve()?;
            let params = load_checkpoint(&cfg, &checkpoint)?;
            let set = load_prompts(&cfg, prompts.as_deref())?;
            let rep = trainer::evaluate(
                &params,
                &cfg.codebook()?,
                &set,
                samples.unwrap_or(cfg.eval_samples),
                &SamplingOptions::at(cfg.temperature),
                cfg.eval_seed,
                &cfg.reward_options(),
            )?;
            println!("{:<10} {:>7} {:>11} {:>10} {:>12}", "task", "samples", "mean_reward", "std_reward", "mean_entropy");
            for s in rep.per_task.iter().chain(std::iter::once(&rep.overall)) {
                println!(
                    "{:<10} {:>7} {:>11.6} {:>10.6} {:>12.6}",
                    s.task, s.samples, s.mean_reward, s.std_reward, s.mean_entropy
                );
            }
        }
        Command::SweepTemp { cfg, checkpoint, temperatures, prompts, samples, out } => {
            let cfg = cfg.resolve()?;
            let params = load_checkpoint(&cfg, &checkpoint)?;
            let set = load_prompts(&cfg, prompts.as_deref())?;
            let rows = trainer::temperature_sweep(
                &params,
                &cfg.codebook()?,
                &set,
                &temperatures,
                samples.unwrap_or(cfg.eval_samples),
                cfg.eval_seed,
                &cfg.reward_options(),
            )?;
            print!("{}", trainer::eval::format_sweep(&rows));
            if let Some(out) = out {
                write_sweep(&out, &rows)?;
            }
        }
        Command::Compare { runs, out_csv, out_txt } => {
            let loaded = runs
                .iter()
                .map(|p| Ok((run_name(p), trainer::read_metrics(&metrics_path(p))?)))
                .collect::<Result<Vec<_>>>()?;
            let rows = trainer::compare_runs(&loaded)?;
            print!("{}", trainer::format_report(&rows));
            match (out_csv, out_txt) {
                (Some(c), Some(t)) => compare::write_report(&c, &t, &rows)?,
                (Some(c), None) => compare::write_report(&c, &c.with_extension("txt"), &rows)?,
                (None, Some(t)) => compare::write_report(&t.with_extension("csv"), &t, &rows)?,
                (None, None) => {}
            }
        }
        Command::Render { cfg, checkpoint, prompts, count, out } => {
            let cfg = cfg.resolve()?;
            let params = load_checkpoint(&cfg, &checkpoint)?;
            let set = load_prompts(&cfg, prompts.as_deref())?;
            let cb = cfg.codebook()?;
            std::fs::create_dir_all(&out)?;
            let opts = SamplingOptions::at(cfg.temperature);
            for (k, prompt) in set.prompts.iter().take(count).enumerate() {
                let mut rng = Rng::derive(cfg.seed, &[k as u64]);
                let r = sample_rollout(&params, prompt, &opts, &mut rng)?;
                let reward = score(&r.tokens, &cb, cfg.grid(), prompt, &cfg.reward_options())?;
                let path = out.join(format!("prompt_{k:03}.ppm"));
                cb.render_grid(&r.tokens, cfg.grid(), &path)?;
                println!("{}  {:?}  reward {reward:.4}", path.display(), prompt);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
