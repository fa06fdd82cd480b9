//! Command-line surface.
//!
//! Every command resolves its arguments into a [`RunConfig`], writes it as
//! `run.toml` into `<out>/<command>-<hash>/` and puts its artifacts and
//! TOML reports next to it. `replay run.toml` re-executes a run from that
//! file alone. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::allocator::{allocate, derive_gamma};
use crate::calib::{kl_divergence, select_calibration, SelectionSetup};
use crate::checkpoint::Checkpoint;
use crate::data::{sample_batch, synthetic, Corpus, Split, SplitRatios};
use crate::error::{Error, Result};
use crate::eval::{bench, eval_ppl};
use crate::model::{ModelConfig, Weights};
use crate::prune::{
    ntk_check, prune_pipeline, resolve_gamma, trial_prune, CalibSettings, GammaSetting, Mode,
    PipelineConfig, EVAL_SEED,
};
use crate::report::{run_dir, to_toml, write_toml};
use crate::saliency::ntk_diag;
use crate::train::{finetune, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ntk-prune", version, about = "NTK-guided structured pruning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Pre-train a model from scratch.
    Train(TrainArgs),
    /// Run the full pruning pipeline.
    Prune(PruneArgs),
    /// Rank candidate calibration batches by KL divergence.
    SelectCalib(SelectArgs),
    /// Perplexity over non-overlapping windows of a split.
    EvalPpl(EvalPplArgs),
    /// Forward KL between two models on a fixed eval batch.
    EvalKl(EvalKlArgs),
    /// Kernel stability check for one calibration batch.
    NtkCheck(NtkArgs),
    /// Analytic MLP/attention allocation ratio.
    Gamma(GammaArgs),
    /// Recovery fine-tuning of a (pruned) checkpoint.
    Finetune(FinetuneArgs),
    /// Forward-pass latency and throughput.
    Bench(BenchArgs),
    /// Write the synthetic multi-genre corpus.
    SynthCorpus(SynthArgs),
    /// Re-execute a run from its run.toml.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CorpusArgs {
    /// Corpus file: raw bytes, documents separated by NUL.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 0.05)]
    pub calib_ratio: f64,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        Corpus::load(
            &self.corpus,
            SplitRatios {
                train: self.train_ratio,
                calib: self.calib_ratio,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl From<&OptimArgs> for TrainConfig {
    fn from(a: &OptimArgs) -> Self {
        TrainConfig {
            steps: a.steps,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            batch: a.batch,
            seq_len: a.seq_len,
            seed: a.seed,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CalibArgs {
    /// Candidate calibration batches.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 32)]
    pub calib_n: usize,
    #[arg(long, default_value_t = 128)]
    pub calib_seq_len: usize,
    /// Candidate `t` uses seed `calib_seed + t`.
    #[arg(long, default_value_t = 0)]
    pub calib_seed: u64,
    #[arg(long, default_value_t = 8)]
    pub eval_n: usize,
    #[arg(long, default_value_t = 128)]
    pub eval_seq_len: usize,
    #[arg(long, default_value_t = EVAL_SEED)]
    pub eval_seed: u64,
}

impl From<&CalibArgs> for CalibSettings {
    fn from(a: &CalibArgs) -> Self {
        CalibSettings {
            trials: a.trials,
            n: a.calib_n,
            seq_len: a.calib_seq_len,
            seed: a.calib_seed,
            eval_n: a.eval_n,
            eval_seq_len: a.eval_seq_len,
            eval_seed: a.eval_seed,
        }
    }
}

fn parse_sparsity(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

fn parse_gamma(s: &str) -> std::result::Result<GammaSetting, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PruneTarget {
    /// Fraction of prunable parameters to remove.
    #[arg(long, value_parser = parse_sparsity, default_value = "0.5")]
    pub sparsity: f64,
    /// `analytic` or a positive ratio v_mlp / v_attn.
    #[arg(long, value_parser = parse_gamma, default_value = "analytic")]
    pub gamma: GammaSetting,
    #[arg(long, value_enum, default_value_t = Mode::Ntk)]
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub max_seq: usize,
    /// Windows of the eval split scored after training.
    #[arg(long, default_value_t = 32)]
    pub eval_windows: usize,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PruneArgs {
    /// Input checkpoint (.nrvk)
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub target: PruneTarget,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SelectArgs {
    /// Input checkpoint (.nrvk)
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub target: PruneTarget,
    #[command(flatten)]
    pub calib: CalibArgs,
    /// Also score each candidate's perplexity on this many eval windows.
    #[arg(long, default_value_t = 0)]
    pub diagnostic_windows: usize,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalPplArgs {
    /// Input checkpoint (.nrvk)
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_parser = parse_split, default_value = "eval")]
    pub split: Split,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long)]
    pub max_windows: Option<usize>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalKlArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub pruned: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 8)]
    pub eval_n: usize,
    #[arg(long, default_value_t = 128)]
    pub eval_seq_len: usize,
    #[arg(long, default_value_t = EVAL_SEED)]
    pub eval_seed: u64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct NtkArgs {
    /// Input checkpoint (.nrvk)
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub target: PruneTarget,
    #[arg(long, default_value_t = 0)]
    pub calib_seed: u64,
    #[arg(long, default_value_t = 32)]
    pub calib_n: usize,
    #[arg(long, default_value_t = 128)]
    pub calib_seq_len: usize,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GammaArgs {
    /// Input checkpoint (.nrvk)
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 0)]
    pub calib_seed: u64,
    #[arg(long, default_value_t = 32)]
    pub calib_n: usize,
    #[arg(long, default_value_t = 128)]
    pub calib_seq_len: usize,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    /// Input checkpoint (.nrvk)
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 32)]
    pub eval_windows: usize,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Input checkpoint (.nrvk)
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub docs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ReplayArgs {
    /// A run.toml written by an earlier run.
    pub run_config: PathBuf,
    /// Parent directory for the replayed run; defaults to the original.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: String,
    pub command: Command,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

impl Command {
    fn label(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Prune(_) => "prune",
            Command::SelectCalib(_) => "select-calib",
            Command::EvalPpl(_) => "eval-ppl",
            Command::EvalKl(_) => "eval-kl",
            Command::NtkCheck(_) => "ntk-check",
            Command::Gamma(_) => "gamma",
            Command::Finetune(_) => "finetune",
            Command::Bench(_) => "bench",
            Command::SynthCorpus(_) => "synth-corpus",
            Command::Replay(_) => "replay",
        }
    }

    fn out_mut(&mut self) -> Option<&mut PathBuf> {
        Some(match self {
            Command::Train(a) => &mut a.out,
            Command::Prune(a) => &mut a.out,
            Command::SelectCalib(a) => &mut a.out,
            Command::EvalPpl(a) => &mut a.out,
            Command::EvalKl(a) => &mut a.out,
            Command::NtkCheck(a) => &mut a.out,
            Command::Gamma(a) => &mut a.out,
            Command::Finetune(a) => &mut a.out,
            Command::Bench(a) => &mut a.out,
            Command::SynthCorpus(a) => &mut a.out,
            Command::Replay(_) => return None,
        })
    }

    /// Makes input paths absolute so the run can be replayed from anywhere.
    fn resolve(&mut self) -> Result<()> {
        let mut inputs: Vec<&mut PathBuf> = Vec::new();
        match self {
            Command::Train(a) => inputs.push(&mut a.corpus.corpus),
            Command::Prune(a) => inputs.extend([&mut a.input, &mut a.corpus.corpus]),
            Command::SelectCalib(a) => inputs.extend([&mut a.input, &mut a.corpus.corpus]),
            Command::EvalPpl(a) => inputs.extend([&mut a.input, &mut a.corpus.corpus]),
            Command::EvalKl(a) => {
                inputs.extend([&mut a.original, &mut a.pruned, &mut a.corpus.corpus])
            }
            Command::NtkCheck(a) => inputs.extend([&mut a.input, &mut a.corpus.corpus]),
            Command::Gamma(a) => inputs.extend([&mut a.input, &mut a.corpus.corpus]),
            Command::Finetune(a) => inputs.extend([&mut a.input, &mut a.corpus.corpus]),
            Command::Bench(a) => inputs.push(&mut a.input),
            Command::SynthCorpus(_) | Command::Replay(_) => {}
        }
        for p in inputs {
            *p = std::fs::canonicalize(&*p)
                .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))?;
        }
        if let Some(out) = self.out_mut() {
            std::fs::create_dir_all(&*out)?;
            *out = std::fs::canonicalize(&*out)?;
        }
        Ok(())
    }
}

/// Parses `argv` and runs the command, printing diagnostics to stderr.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(dir) => {
            println!("run_dir = {:?}", dir.display().to_string());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            match e {
                Error::InvalidArgument { .. } => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<PathBuf> {
    match command {
        Command::Replay(args) => {
            let mut config = RunConfig::load(&args.run_config)?;
            if let (Some(out), Some(slot)) = (args.out, config.command.out_mut()) {
                *slot = out;
            }
            execute(config.command)
        }
        other => execute(other),
    }
}

/// Resolves, records and runs one command; returns its run directory.
pub fn execute(mut command: Command) -> Result<PathBuf> {
    command.resolve()?;
    let parent = command.out_mut().map(|p| p.clone()).unwrap_or_default();
    let mut hashed = command.clone();
    if let Some(out) = hashed.out_mut() {
        *out = PathBuf::new();
    }
    let config = RunConfig {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command,
    };
    let hashed = to_toml(&RunConfig {
        version: config.version.clone(),
        command: hashed,
    })?;
    let dir = run_dir(&parent, config.command.label(), &hashed)?;
    write_toml(&dir.join("run.toml"), &config)?;
    run(&config.command, &dir)?;
    Ok(dir)
}

fn emit<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = to_toml(value)?;
    std::fs::write(dir.join(name), &text)?;
    println!("# {name}\n{text}");
    Ok(())
}

fn load_weights(path: &Path) -> Result<Weights> {
    Ok(Checkpoint::load(path)?.weights)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    eval_ppl: f64,
    log: Vec<LossPoint>,
}

#[derive(Serialize)]
struct LossPoint {
    step: usize,
    loss: f64,
}

fn loss_log(losses: &[f64], every: usize) -> Vec<LossPoint> {
    losses
        .iter()
        .enumerate()
        .filter(|(i, _)| i % every == 0 || *i + 1 == losses.len())
        .map(|(step, &loss)| LossPoint { step, loss })
        .collect()
}

#[derive(Serialize)]
struct NtkSummary {
    ntk_diag: f64,
    grad_l1: f64,
    gamma: f64,
    report: crate::saliency::NtkReport,
}

#[derive(Serialize)]
struct KlSummary {
    kl: f64,
    eval_n: usize,
    eval_seq_len: usize,
    eval_seed: u64,
}

fn run(command: &Command, dir: &Path) -> Result<()> {
    match command {
        Command::Train(a) => {
            let corpus = a.corpus.load()?;
            let config = ModelConfig::uniform(
                a.d_model, a.d_ff, a.heads, a.kv_heads, a.layers, a.max_seq,
            )?;
            let cfg = TrainConfig::from(&a.optim);
            let mut weights = Weights::init(&config, a.optim.seed)?;
            let report = match train(&mut weights, &corpus, &cfg) {
                Err(Error::Diverged { step, last_good }) => {
                    Checkpoint::new(*last_good)
                        .with("kind", "diverged")
                        .with("step", step)
                        .save(&dir.join("last_good.nrvk"))?;
                    return Err(Error::Diverged {
                        step,
                        last_good: Box::new(weights),
                    });
                }
                r => r?,
            };
            let ppl = eval_ppl(&weights, &corpus, Split::Eval, cfg.seq_len, Some(a.eval_windows))?;
            Checkpoint::new(weights)
                .with("kind", "train")
                .with("steps", cfg.steps)
                .with("seed", cfg.seed)
                .with("corpus", &corpus.name)
                .save(&dir.join("model.nrvk"))?;
            emit(
                dir,
                "report.toml",
                &TrainSummary {
                    steps: report.steps,
                    first_loss: report.first_loss(),
                    last_loss: report.last_loss(),
                    eval_ppl: ppl.perplexity,
                    log: loss_log(&report.losses, cfg.log_every),
                },
            )
        }
        Command::Prune(a) => {
            let corpus = a.corpus.load()?;
            let weights = load_weights(&a.input)?;
            let config = PipelineConfig {
                v: a.target.sparsity,
                gamma: a.target.gamma,
                mode: a.target.mode,
                calib: (&a.calib).into(),
            };
            let out = prune_pipeline(&config, &corpus, &weights)?;
            Checkpoint::new(out.pruned.clone())
                .with("kind", "prune")
                .with("parent", a.input.display())
                .with("sparsity", config.v)
                .with("gamma", out.sparsity.gamma)
                .with("mode", format!("{:?}", config.mode))
                .with("calib_seed", out.calibration.seed)
                .save(&dir.join("pruned.nrvk"))?;
            std::fs::write(dir.join("spec.txt"), out.spec.to_text())?;
            if let Some(g) = &out.gamma {
                emit(dir, "gamma.toml", g)?;
            }
            if let Some(s) = &out.selection {
                emit(dir, "selection.toml", s)?;
            }
            emit(dir, "ntk.toml", &out.ntk)?;
            emit(dir, "sparsity.toml", &out.sparsity)
        }
        Command::SelectCalib(a) => {
            let corpus = a.corpus.load()?;
            let weights = load_weights(&a.input)?;
            let config = PipelineConfig {
                v: a.target.sparsity,
                gamma: a.target.gamma,
                mode: a.target.mode,
                calib: (&a.calib).into(),
            };
            let (gamma, _) = resolve_gamma(&config, &weights, &corpus)?;
            let plan = allocate(config.v, gamma, weights.param_counts())?;
            let c = config.calib;
            let eval = sample_batch(&corpus, Split::Eval, c.eval_seed, c.eval_n, c.eval_seq_len)?;
            let diag: Vec<Vec<u32>> = corpus
                .windows(Split::Eval, c.eval_seq_len)
                .into_iter()
                .take(a.diagnostic_windows)
                .collect();
            let setup = SelectionSetup {
                seeds: (0..c.trials as u64).map(|t| c.seed.wrapping_add(t)).collect(),
                n: c.n,
                seq_len: c.seq_len,
            };
            let ranking = if config.mode == Mode::Local {
                crate::allocator::Ranking::Local
            } else {
                crate::allocator::Ranking::Global
            };
            let report = select_calibration(
                &weights,
                &corpus,
                &setup,
                &eval,
                (!diag.is_empty()).then_some(diag.as_slice()),
                |batch| trial_prune(&weights, batch, &plan, config.mode, ranking),
            )?;
            emit(dir, "selection.toml", &report)
        }
        Command::EvalPpl(a) => {
            let corpus = a.corpus.load()?;
            let weights = load_weights(&a.input)?;
            let r = eval_ppl(&weights, &corpus, a.split, a.seq_len, a.max_windows)?;
            emit(dir, "report.toml", &r)
        }
        Command::EvalKl(a) => {
            let corpus = a.corpus.load()?;
            let original = load_weights(&a.original)?;
            let pruned = load_weights(&a.pruned)?;
            let eval = sample_batch(&corpus, Split::Eval, a.eval_seed, a.eval_n, a.eval_seq_len)?;
            let kl = kl_divergence(&original, &pruned, &eval)?;
            emit(
                dir,
                "report.toml",
                &KlSummary {
                    kl,
                    eval_n: a.eval_n,
                    eval_seq_len: a.eval_seq_len,
                    eval_seed: a.eval_seed,
                },
            )
        }
        Command::NtkCheck(a) => {
            let corpus = a.corpus.load()?;
            let weights = load_weights(&a.input)?;
            let batch = sample_batch(&corpus, Split::CalibPool, a.calib_seed, a.calib_n, a.calib_seq_len)?;
            let mut config = PipelineConfig::new(a.target.sparsity, a.target.gamma, a.target.mode);
            config.calib.seed = a.calib_seed;
            config.calib.n = a.calib_n;
            config.calib.seq_len = a.calib_seq_len;
            let (gamma, _) = resolve_gamma(&config, &weights, &corpus)?;
            let (spec, report) = ntk_check(&weights, &batch, config.v, gamma, config.mode)?;
            std::fs::write(dir.join("spec.txt"), spec.to_text())?;
            let (_, g) = crate::model::output_f_gradient(&weights, &batch.samples)?;
            emit(
                dir,
                "ntk.toml",
                &NtkSummary {
                    ntk_diag: ntk_diag(&weights, &batch)?,
                    grad_l1: crate::saliency::theta_of(&g),
                    gamma,
                    report,
                },
            )
        }
        Command::Gamma(a) => {
            let corpus = a.corpus.load()?;
            let weights = load_weights(&a.input)?;
            let batch = sample_batch(&corpus, Split::CalibPool, a.calib_seed, a.calib_n, a.calib_seq_len)?;
            emit(dir, "gamma.toml", &derive_gamma(&weights, &batch)?)
        }
        Command::Finetune(a) => {
            let corpus = a.corpus.load()?;
            let mut weights = load_weights(&a.input)?;
            let cfg = TrainConfig::from(&a.optim);
            let report = finetune(&mut weights, &corpus, &cfg, Some(a.eval_windows))?;
            Checkpoint::new(weights)
                .with("kind", "finetune")
                .with("parent", a.input.display())
                .with("steps", cfg.steps)
                .save(&dir.join("model.nrvk"))?;
            #[derive(Serialize)]
            struct Summary {
                ppl_before: f64,
                ppl_after: f64,
                steps: usize,
                log: Vec<LossPoint>,
            }
            emit(
                dir,
                "report.toml",
                &Summary {
                    ppl_before: report.ppl_before,
                    ppl_after: report.ppl_after,
                    steps: report.train.steps,
                    log: loss_log(&report.train.losses, cfg.log_every),
                },
            )
        }
        Command::Bench(a) => {
            let weights = load_weights(&a.input)?;
            emit(dir, "report.toml", &bench(&weights, a.batch, a.seq_len, a.rounds, a.seed)?)
        }
        Command::SynthCorpus(a) => {
            let path = dir.join("corpus.bin");
            std::fs::write(&path, synthetic::generate(a.seed, a.docs))?;
            println!("corpus = {:?}", path.display().to_string());
            Ok(())
        }
        Command::Replay(_) => Err(Error::invalid("command", "replay cannot be replayed")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_out_of_range_names_flag() {
        let err = Cli::try_parse_from(["ntk-prune", "prune", "--in", "x", "--corpus", "y", "--sparsity", "1.5"])
            .unwrap_err();
        assert!(err.to_string().contains("--sparsity"), "{err}");
        assert_eq!(main_with_args(["ntk-prune", "prune", "--in", "x", "--corpus", "y", "--sparsity", "1.5"]), EXIT_USAGE);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(main_with_args(["ntk-prune", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn run_config_roundtrips_through_toml() {
        let cli = Cli::try_parse_from([
            "ntk-prune", "prune", "--in", "a.nrvk", "--corpus", "c.bin", "--gamma", "3", "--mode", "local",
        ])
        .unwrap();
        let config = RunConfig {
            version: "0".into(),
            command: cli.command,
        };
        let text = to_toml(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }
}
