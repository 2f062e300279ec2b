use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ftp_core::audit::{verify_lipschitz_bound, MixedPairSampler};
use ftp_core::NamedParams;

use ftp_bench::checkpoint::Checkpoint;
use ftp_bench::metrics::write_text;
use ftp_bench::sweep::{default_threads, method_means, sweep};
use ftp_bench::{
    evaluate, generate_shift_dataset, pretrain, run_experiment, Error, ExperimentConfig, Method,
    Result,
};

#[derive(Parser)]
#[command(
    name = "ftp-bench",
    version,
    about = "Projection-constrained fine-tuning benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file; defaults apply when omitted
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. --set lr=0.1 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the anchor model on the clean training pool
    Pretrain(ConfigArgs),
    /// Fine-tune with the configured method and evaluate
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the clean and shifted splits
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Lipschitz audit of a fine-tuned checkpoint against its anchor
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fine-tuned checkpoint (its stored anchors are used)
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        sampler_seed: u64,
    },
    /// Run a seed x method grid
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated method names
        #[arg(long, default_value = "ft,ftp")]
        methods: String,
        /// Comma-separated seeds
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn load_values(path: &PathBuf, cfg: &ExperimentConfig, prefix: &str) -> Result<NamedParams> {
    let spec = cfg.model_spec()?;
    let c = Checkpoint::load(path)?;
    if c.spec_hash != spec.fingerprint() {
        return Err(Error::Persistence(
            "checkpoint does not match the configured model".into(),
        ));
    }
    let mut out = NamedParams::new();
    for name in spec.param_names() {
        out.insert(name.clone(), c.require(&format!("{prefix}{name}"))?.clone())?;
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.load()?;
            let data = generate_shift_dataset(&cfg.dataset, cfg.seed)?;
            let p = pretrain(&cfg, &data)?;
            let path = cfg.output_dir.join("pretrained.ckpt");
            p.to_checkpoint().save(&path)?;
            p.record.write(&cfg.output_dir.join("pretrain"))?;
            let table = evaluate(&p.spec, &p.params, &data)?;
            write_text(
                &cfg.output_dir.join("pretrain/summary.json"),
                &serde_json::to_string_pretty(&table)?,
            )?;
            println!("saved {}", path.display());
            println!("id {:.4}  ood_avg {:.4}", table.id, table.ood_average);
        }
        Command::Finetune { cfg, resume } => {
            let cfg = cfg.load()?;
            let out = run_experiment(&cfg, resume.as_deref())?;
            let s = &out.summary;
            println!(
                "{} seed {}: {} iters, final loss {:.4}, id {:.4}, ood_avg {:.4}",
                s.method, s.seed, s.iterations, s.final_loss, s.accuracy.id, s.accuracy.ood_average
            );
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Evaluate { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let data = generate_shift_dataset(&cfg.dataset, cfg.seed)?;
            let params = load_values(&checkpoint, &cfg, "value/")?;
            let table = evaluate(&cfg.model_spec()?, &params, &data)?;
            println!("{}", serde_json::to_string_pretty(&table)?);
        }
        Command::Audit {
            cfg,
            checkpoint,
            pairs,
            sampler_seed,
        } => {
            let cfg = cfg.load()?;
            let spec = cfg.model_spec()?;
            let tuned = load_values(&checkpoint, &cfg, "value/")?;
            let anchor = load_values(&checkpoint, &cfg, "anchor/")?;
            let mut sampler = MixedPairSampler::new(sampler_seed, spec.input_width());
            let report = verify_lipschitz_bound(&spec, &tuned, &anchor, &mut sampler, pairs)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.holds {
                return Err(Error::Config(
                    "sampled ratios exceed the Lipschitz bound".into(),
                ));
            }
        }
        Command::Sweep {
            cfg,
            methods,
            seeds,
            threads,
        } => {
            let cfg = cfg.load()?;
            let methods: Vec<Method> = methods
                .split(',')
                .map(|m| m.trim().parse())
                .collect::<Result<_>>()?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed `{s}`")))
                })
                .collect::<Result<_>>()?;
            let results = sweep(
                &cfg,
                &methods,
                &seeds,
                threads.unwrap_or_else(default_threads),
                true,
            )?;
            println!("{:<14} {:>8} {:>8}", "method", "id", "ood_avg");
            for m in methods {
                if let Some((id, ood)) = method_means(&results, m) {
                    println!("{:<14} {:>8.4} {:>8.4}", m.to_string(), id, ood);
                }
            }
            println!("table in {}", cfg.output_dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
