use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use bootvit::ablate::{apply_toggles, Toggles};
use bootvit::config::{resolve, RunConfig};
use bootvit::curves::curves;
use bootvit::data::{synthetic, write_cifar10_dir};
use bootvit::inspect::{inspect_phi, Layout};
use bootvit::sweep::{sweep, Grid};
use bootvit::train::{load_data, parameter_counts, train};
use bootvit::verify::{cifar_dir, run_all, Status};

#[derive(Parser)]
#[command(name = "bootvit", version, about = "Joint training of vision transformers with convolutional agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train(RunArgs),
    /// Train with parts of the objective switched off.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        no_mutual: bool,
        #[arg(long)]
        no_feat: bool,
        #[arg(long)]
        no_decay: bool,
        /// Adapt agent features with 2-D average pooling.
        #[arg(long)]
        adapt_avg_pool: bool,
        /// Remove the feature term of a 1-based layer; repeatable.
        #[arg(long = "drop-layer")]
        drop_layers: Vec<usize>,
        /// Allow --no-feat together with --no-mutual.
        #[arg(long)]
        allow_scratch: bool,
    },
    /// Train every point of an alpha x beta x temperature grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        beta: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        temperature: Vec<f64>,
    },
    /// Merge validation curves of finished runs into CSV and SVG.
    Curves {
        /// metrics.csv files or run directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "curves")]
        out: PathBuf,
    },
    /// Print the selection matrices of each head.
    InspectPhi {
        #[arg(long, default_value_t = 9)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        side: usize,
        /// dense or triplets
        #[arg(long, default_value = "dense")]
        layout: String,
    },
    /// Parameter counts of a configuration.
    Params(RunArgs),
    /// Write a synthetic dataset in the CIFAR-10 binary layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate the acceptance criteria.
    Check {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "runs/check")]
        work: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` file; its entries override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    /// Any configuration key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut pairs = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("scheme", self.scheme.clone());
        push("arch", self.arch.clone());
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        push("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        push("fraction", self.fraction.map(|v| v.to_string()));
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let file = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        Ok(resolve(&pairs, file.as_deref())?)
    }
}

fn print_summary(summary: &[(String, String)]) {
    for (k, v) in summary {
        println!("{k} = {v}");
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(args) => print_summary(&train(&args.resolve()?)?.summary),
        Command::Ablate {
            run,
            no_mutual,
            no_feat,
            no_decay,
            adapt_avg_pool,
            drop_layers,
            allow_scratch,
        } => {
            let mut cfg = run.resolve()?;
            let t = Toggles {
                no_mutual,
                no_feat,
                no_decay,
                avg_pool_adapt: adapt_avg_pool,
                drop_layers,
                allow_scratch,
            };
            apply_toggles(&mut cfg, &t)?;
            print_summary(&train(&cfg)?.summary);
        }
        Command::Sweep { run, alpha, beta, temperature } => {
            let cfg = run.resolve()?;
            let data = load_data(&cfg)?;
            print!("{}", sweep(&cfg, &Grid { alpha, beta, temperature }, &data)?);
        }
        Command::Curves { inputs, out } => {
            let series = curves(&inputs, &out)?;
            println!("{} series written to {}", series.len(), out.display());
        }
        Command::InspectPhi { heads, side, layout } => {
            let Some(layout) = Layout::parse(&layout) else {
                bail!("layout must be dense or triplets, got {layout:?}");
            };
            print!("{}", inspect_phi(heads, side, layout)?);
        }
        Command::Params(args) => {
            for (k, v) in parameter_counts(&args.resolve()?)? {
                println!("{k} = {v}");
            }
        }
        Command::Synth {
            out,
            train_per_class,
            test_per_class,
            seed,
        } => {
            let train = synthetic(train_per_class, 10, seed);
            let test = synthetic(test_per_class, 10, seed.wrapping_add(1));
            write_cifar10_dir(&out, &train, &test)?;
            println!("{} training and {} test images written to {}", train.len(), test.len(), out.display());
        }
        Command::Check { data_dir, work } => {
            let reports = run_all(&data_dir.unwrap_or_else(cifar_dir), &work);
            for r in &reports {
                println!("{}", r.line());
            }
            return Ok(reports.iter().all(|r| r.status != Status::Fail));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
