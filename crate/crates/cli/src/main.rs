use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vslowfast::cost::cost_table;
use vslowfast::data::{load_image, save_pgm, DataConfig, Dataset};
use vslowfast::dsp::wav::{load_wav, save_wav};
use vslowfast::model::{ModelConfig, Ordering};
use vslowfast::selftest;
use vslowfast::train::{self, load_checkpoint, separate, TrainConfig, LOG_FILE};

#[derive(Parser, Debug)]
#[command(name = "vslowfast", version, about = "Visually guided sound separation with slow and fast spectrogram streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and write WAVs, PPMs and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the metrics log and checkpoints to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on a dataset written by gen-data instead of generating one.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Separate one mixture given one image per source.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        /// One PPM per source to extract, in output order.
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on test mixtures next to the copy-paste baseline.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset written by gen-data; regenerated from the config otherwise.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sources: Option<usize>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter and MAC counts for one or more configs.
    Cost {
        /// Training or model config; repeat to build a table.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        #[arg(long)]
        alpha_slow: Option<usize>,
        #[arg(long)]
        alpha_fast: Option<usize>,
        #[arg(long)]
        ordering: Option<Ordering>,
    },
    /// Run the gradient, oracle and cost self-checks.
    Check {
        /// Random seeds per check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Training config JSON; the built-in default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha_slow: Option<usize>,
    #[arg(long)]
    alpha_fast: Option<usize>,
    #[arg(long)]
    ordering: Option<Ordering>,
    #[arg(long)]
    sources: Option<usize>,
}

fn apply_model_overrides(m: &mut ModelConfig, slow: Option<usize>, fast: Option<usize>, ordering: Option<Ordering>) {
    if let Some(a) = slow {
        m.slow_alpha = a;
    }
    if let Some(a) = fast {
        m.fast_alpha = a;
    }
    if let Some(o) = ordering {
        m.ordering = o;
    }
}

fn resolve(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.sources {
        cfg.n_sources = n;
    }
    apply_model_overrides(&mut cfg.model, common.alpha_slow, common.alpha_fast, common.ordering);
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn print_config(cfg: &TrainConfig) {
    println!("resolved config:\n{}", cfg.to_json());
}

fn load_dataset(manifest: Option<&Path>, cfg: &TrainConfig) -> Result<Dataset> {
    match manifest {
        Some(p) => {
            let d = Dataset::load(p).with_context(|| format!("loading manifest {}", p.display()))?;
            if d.config != cfg.data {
                bail!("{}: data section differs from the config's", p.display());
            }
            Ok(d)
        }
        None => Ok(train::generate_dataset(cfg)?),
    }
}

/// A cost config is either a full training config or a bare model config.
fn load_cost_config(path: &Path) -> Result<(ModelConfig, DataConfig)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(t) = TrainConfig::from_json(&text) {
        return Ok((t.model, t.data));
    }
    let m = ModelConfig::from_json(&text).map_err(|e| anyhow!("{}: not a training or model config: {e}", path.display()))?;
    Ok((m, DataConfig::default()))
}

enum Outcome {
    Done,
    SelfTestFailed,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = resolve(&common)?;
            print_config(&cfg);
            let data = train::generate_dataset(&cfg)?;
            let manifest = data.save(&out).with_context(|| format!("writing dataset to {}", out.display()))?;
            println!("wrote {} items to {}", manifest.items.len(), out.join("manifest.json").display());
        }
        Command::Train { common, manifest, out } => {
            let cfg = resolve(&common)?;
            print_config(&cfg);
            let data = load_dataset(manifest.as_deref(), &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let log_path = out.join(LOG_FILE);
            let log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
            let outcome = train::train(&cfg, &data, Some(&out), std::io::BufWriter::new(log))?;
            if let Some(last) = outcome.trace.last() {
                println!("step {} total {:.6} l_sep {:.6} l_e {:.6} l_M {:.6}", last.step, last.total, last.l_sep, last.l_e, last.l_m);
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Separate { checkpoint, mixture, images, out } => {
            let (cfg, model) = load_checkpoint(&checkpoint, None).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            print_config(&cfg);
            let mix = load_wav(&mixture).with_context(|| format!("reading {}", mixture.display()))?;
            let tensors = images
                .iter()
                .map(|p| load_image(p, cfg.model.image_size).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let results = separate(&model, &mix, &tensors, cfg.data.framing())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (n, r) in results.iter().enumerate() {
                let wav = out.join(format!("source{n}.wav"));
                save_wav(&r.waveform, &wav).with_context(|| format!("writing {}", wav.display()))?;
                save_pgm(&r.mask, out.join(format!("mask{n}.pgm")))?;
                save_pgm(&r.localization, out.join(format!("localization{n}.pgm")))?;
                println!("wrote {}", wav.display());
            }
        }
        Command::Evaluate { checkpoint, manifest, seed, sources, out } => {
            let (mut cfg, model) =
                load_checkpoint(&checkpoint, None).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = sources {
                cfg.n_sources = n;
            }
            cfg.validate().context("invalid configuration")?;
            print_config(&cfg);
            let data = load_dataset(manifest.as_deref(), &cfg)?;
            let report = train::evaluate_model(&model, &cfg, &data)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => {
                    fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
                    println!("report written to {}", p.display());
                }
                None => println!("{json}"),
            }
            let fmt = |v: Option<f64>| v.map_or("capped".to_string(), |x| format!("{x:.3}"));
            println!("SDR {} dB, copy-paste {} dB", fmt(report.separated.sdr), fmt(report.copy_paste.sdr));
        }
        Command::Cost { configs, alpha_slow, alpha_fast, ordering } => {
            let mut rows = Vec::new();
            let mut shape = None;
            for p in &configs {
                let (mut m, d) = load_cost_config(p)?;
                apply_model_overrides(&mut m, alpha_slow, alpha_fast, ordering);
                m.validate().with_context(|| format!("{}: invalid model config", p.display()))?;
                let s = d.spec_shape();
                if *shape.get_or_insert(s) != s {
                    bail!("{}: spectrogram shape {s:?} differs from the first config's", p.display());
                }
                println!("resolved config {}:\n{}", p.display(), m.to_json());
                let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                rows.push((label, m));
            }
            if rows.is_empty() {
                let m = ModelConfig::default();
                println!("resolved config (default):\n{}", m.to_json());
                rows.push(("default".to_string(), m));
            }
            let table = cost_table(&rows, shape.unwrap_or_else(|| DataConfig::default().spec_shape()))?;
            print!("{}", table.to_text());
        }
        Command::Check { seeds } => {
            println!("resolved config: {{\"seeds\": {seeds}}}");
            let results = selftest::run_all(seeds)?;
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
            for r in &failed {
                println!("FAIL {} seed {}: error {:e} > {:e}", r.name, r.seed, r.error, r.tolerance);
            }
            println!("{} checks, {} failed", results.len(), failed.len());
            if !failed.is_empty() {
                return Ok(Outcome::SelfTestFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::SelfTestFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
