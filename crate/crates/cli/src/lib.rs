//! Command-line front end: training, sampling, sync evaluation, gate
//! analysis, gradient checks and dataset generation.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use syncflow_core::analysis::{evaluate_sync, gate_analysis, sample_av, score_clip, SampleOptions};
use syncflow_core::checks::{grad_check_suite, GRAD_TOLERANCE};
use syncflow_core::error::{Error, LabResult};
use syncflow_core::flowmatch::{DEFAULT_CFG_SCALE, DEFAULT_SAMPLE_STEPS};
use syncflow_core::trainer::{load_checkpoint, train_with, RunConfig};
use syncflow_core::world::{find_peaks, generate_episode_with, Dataset, EpisodeClass};

/// Seed of the held-out episodes used by `eval-sync` and `analyze-gates`.
pub const EVAL_DATA_SEED: u64 = 777;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "syncflow", version, about = "Cross-modal flow matching laboratory")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print a progress line every N steps (0 = quiet).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Generate one clip for a class condition and print a JSON summary.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// NarrationHeavy, SfxHeavy or Balanced (case-insensitive).
        #[arg(long)]
        class: EpisodeClass,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_CFG_SCALE)]
        cfg_scale: f64,
        /// Also write the generated tensors as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score onset/motion alignment of generated clips.
    EvalSync {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Collect semantic gate values per layer, flow-time decile and class.
    AnalyzeGates {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 6)]
        episodes: usize,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run the finite-difference gradient checks.
    GradCheck,
    /// Write a synthetic dataset in the binary episode format.
    DatasetGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON run configuration supplying the world shape; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    /// Read episodes from a dataset file instead of generating them.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = EVAL_DATA_SEED)]
    data_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_CFG_SCALE)]
    cfg_scale: f64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalArgs {
    fn options(&self) -> SampleOptions {
        SampleOptions {
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            seed: self.seed,
            ..SampleOptions::default()
        }
    }

    fn episodes(&self, config: &RunConfig, count: usize) -> LabResult<Dataset> {
        match &self.dataset {
            Some(path) => {
                let mut ds = Dataset::load(path)?;
                if ds.episodes.len() < count {
                    return Err(Error::Config(format!(
                        "{} holds {} episodes, {count} requested",
                        path.display(),
                        ds.episodes.len()
                    )));
                }
                ds.episodes.truncate(count);
                Ok(ds)
            }
            None => Dataset::generate(config.world_spec(), self.data_seed, count),
        }
    }
}

/// Parse `argv` (program name first) and run the command. Returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn write_output(out: Option<&Path>, body: &[u8]) -> LabResult<()> {
    match out {
        Some(path) => std::fs::write(path, body).map_err(|e| Error::io(path, e)),
        None => std::io::stdout().write_all(body).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn run(command: Command) -> LabResult<i32> {
    match command {
        Command::Train { config, log_every } => {
            let cfg = RunConfig::from_file(&config)?;
            let total = cfg.total_steps;
            let artifacts = train_with(&cfg, |r| {
                if log_every > 0 && (r.step + 1) % log_every == 0 {
                    eprintln!("step {}/{total} phase {} loss {:.4}", r.step + 1, r.phase.index(), r.loss_total);
                }
            })?;
            println!("metrics: {}", artifacts.metrics.display());
            println!("checkpoint: {}", artifacts.checkpoint.display());
        }
        Command::Sample {
            ckpt,
            class,
            seed,
            steps,
            cfg_scale,
            out,
        } => {
            let (cfg, model) = load_checkpoint(&ckpt)?;
            let opts = SampleOptions {
                steps,
                cfg_scale,
                seed,
                ..SampleOptions::default()
            };
            let episode = generate_episode_with(&cfg.world_spec(), seed, class)?;
            let gen = sample_av(&model, &episode.cond, episode.frames(), &opts)?;
            let entry = score_clip(&gen, model.config.tokens_per_frame);
            let final_gates = gen.gates.last().map(|s| s.layers.clone()).unwrap_or_default();
            let summary = json!({
                "class": class.name(),
                "seed": seed,
                "steps": steps,
                "cfg_scale": cfg_scale,
                "frames": episode.frames(),
                "audio_tokens": episode.audio_len(),
                "streams": gen.audio.len(),
                "reference_peaks": find_peaks(&episode.motion),
                "mean_abs_lag": entry.mean_abs_lag,
                "matched": entry.matched,
                "unmatched": entry.unmatched,
                "final_gates": final_gates,
            });
            println!("{summary}");
            if let Some(path) = out {
                let tensor = |t: &syncflow_core::Tensor| json!({ "shape": t.shape(), "data": t.data() });
                let body = json!({
                    "summary": summary,
                    "video": tensor(&gen.video),
                    "audio": gen.audio.iter().map(tensor).collect::<Vec<_>>(),
                });
                write_output(Some(&path), body.to_string().as_bytes())?;
            }
        }
        Command::EvalSync { ckpt, episodes, eval } => {
            let (cfg, model) = load_checkpoint(&ckpt)?;
            let ds = eval.episodes(&cfg, episodes)?;
            let report = evaluate_sync(&model, &ds.episodes, &eval.options())?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv).map_err(|e| Error::io("<buffer>", e))?;
            write_output(eval.out.as_deref(), &csv)?;
            eprintln!("mean lag {:.4} median lag {:.4}", report.mean(), report.median());
        }
        Command::AnalyzeGates { ckpt, episodes, eval } => {
            let (cfg, model) = load_checkpoint(&ckpt)?;
            let ds = eval.episodes(&cfg, episodes)?;
            let report = gate_analysis(&model, &ds.episodes, &eval.options())?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv).map_err(|e| Error::io("<buffer>", e))?;
            write_output(eval.out.as_deref(), &csv)?;
        }
        Command::GradCheck => {
            let results = grad_check_suite()?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{status:4} {:<40} max rel error {:.3e}", r.name, r.report.max_rel_error);
                failed += usize::from(!r.passed());
            }
            println!("{} checks, {failed} failed (tolerance {GRAD_TOLERANCE:e})", results.len());
            if failed > 0 {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::DatasetGen { out, count, seed, config } => {
            let cfg = match config {
                Some(path) => RunConfig::from_file(&path)?,
                None => RunConfig::default(),
            };
            let ds = Dataset::generate(cfg.world_spec(), seed, count)?;
            ds.save(&out)?;
            println!("wrote {count} episodes to {}", out.display());
        }
    }
    Ok(EXIT_OK)
}
