use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ndsweep::data::{write_mnist_idx, Dataset};
use ndsweep::experiment::{
    cmd_brain_damage, cmd_k_sweep, cmd_layerwise, cmd_oracle, cmd_train, select_capacity,
    CapacityCurve, ExperimentConfig, FilterOrder,
};
use ndsweep::plot::write_svg;
use ndsweep::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ndsweep",
    about = "Train CNNs with nested dropout and unit sweeping to discover per-layer filter capacity",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,

    /// Override the solver RNG seed from the config
    #[arg(long)]
    seed: Option<u64>,

    /// Evaluate on only the first N test samples
    #[arg(long)]
    eval_subset: Option<usize>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            config.solver.rng_seed = seed;
        }
        Ok(config)
    }

    fn eval_set(&self, config: &ExperimentConfig) -> Result<Dataset> {
        let (_, test) = config.dataset.load()?;
        match self.eval_subset.or(config.dataset.eval_subset()) {
            Some(n) => test.take(n),
            None => Ok(test),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Trained,
    Norm,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network per the config, writing checkpoints and a log
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Run directory (default: <output.dir>/train)
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Train without nested dropout even if the config attaches it
        #[arg(long)]
        no_nested_dropout: bool,
    },
    /// Evaluate sweep checkpoints with prefix truncation; emit a capacity curve
    KSweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Run directory holding sweep_*.ckpt and final.ckpt
        #[arg(long)]
        run_dir: PathBuf,
        /// Output CSV (default: <run-dir>/k_sweep.csv)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also report the selected capacity for this tolerance
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Truncate a conventionally trained network post hoc; emit a capacity curve
    BrainDamage {
        #[command(flatten)]
        common: CommonArgs,
        /// Run directory holding final.ckpt of a plain run
        #[arg(long)]
        run_dir: PathBuf,
        /// Filter ordering used for truncation
        #[arg(long, value_enum, default_value = "trained")]
        order: OrderArg,
        /// Output CSV (default: <run-dir>/brain_damage.csv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one full network per candidate width; emit curve plus cost accounting
    Oracle {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated candidate widths, e.g. 4,8,12,16
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<usize>,
        /// Training iterations per oracle network (default: solver.max_iters)
        #[arg(long)]
        iters: Option<usize>,
        /// Output directory (default: <output.dir>/oracle)
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Size several conv layers in sequence, truncating between rounds
    Layerwise {
        #[command(flatten)]
        common: CommonArgs,
        /// Accuracy tolerance for capacity selection
        #[arg(long, default_value_t = 0.005)]
        epsilon: f64,
    },
    /// Render capacity-curve CSVs into a standalone SVG
    Plot {
        /// Input curves (CSV)
        #[arg(required = true)]
        curves: Vec<PathBuf>,
        /// Output SVG path
        #[arg(long)]
        out: PathBuf,
        /// Legend labels, one per curve (default: file stems)
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
    },
    /// Generate the synthetic digit dataset as IDX files
    GenData {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 4000)]
        n_train: usize,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn default_out(run_dir: &Path, name: &str, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| run_dir.join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            run_dir,
            no_nested_dropout,
        } => {
            let mut config = common.load()?;
            if no_nested_dropout {
                config.nested_dropout = None;
            }
            let run_dir = run_dir.unwrap_or_else(|| config.output.dir.join("train"));
            let summary = cmd_train(&config, &run_dir)?;
            println!(
                "trained {} iterations, {} sweep checkpoints, run dir {}",
                summary.total_iters,
                summary.sweep_checkpoints,
                summary.run_dir.display()
            );
            if let Some(loss) = summary.final_loss {
                println!("final training loss {loss}");
            }
        }
        Command::KSweep {
            common,
            run_dir,
            out,
            epsilon,
        } => {
            let config = common.load()?;
            let eval = common.eval_set(&config)?;
            let curve = cmd_k_sweep(&run_dir, &eval)?;
            let out = default_out(&run_dir, "k_sweep.csv", out);
            curve.write(&out)?;
            print!("{}", curve.to_csv());
            println!("wrote {}", out.display());
            if let Some(eps) = epsilon {
                println!("selected capacity: {}", select_capacity(&curve, eps)?);
            }
        }
        Command::BrainDamage {
            common,
            run_dir,
            order,
            out,
        } => {
            let config = common.load()?;
            let spec = config.network.build()?;
            let layer = config.target_layer(&spec)?;
            let eval = common.eval_set(&config)?;
            let order = match order {
                OrderArg::Trained => FilterOrder::Trained,
                OrderArg::Norm => FilterOrder::Norm,
            };
            let curve = cmd_brain_damage(&run_dir, &eval, layer, order)?;
            let out = default_out(&run_dir, "brain_damage.csv", out);
            curve.write(&out)?;
            print!("{}", curve.to_csv());
            println!("wrote {}", out.display());
        }
        Command::Oracle {
            common,
            k_list,
            iters,
            out_dir,
        } => {
            let mut config = common.load()?;
            if let Some(n) = common.eval_subset {
                // narrow evaluation for the oracle runs too
                set_eval_subset(&mut config, n);
            }
            let out_dir = out_dir.unwrap_or_else(|| config.output.dir.join("oracle"));
            let outcome = cmd_oracle(&config, &k_list, iters, &out_dir)?;
            let out = out_dir.join("oracle.csv");
            outcome.curve.write(&out)?;
            print!("{}", outcome.curve.to_csv());
            println!("wrote {}", out.display());
            println!(
                "oracle iterations: {} total; nested-dropout run: {}; ratio {:.3}",
                outcome.total_iters,
                outcome.nested_iters,
                outcome.nested_iters as f64 / outcome.total_iters as f64
            );
        }
        Command::Layerwise { common, epsilon } => {
            let mut config = common.load()?;
            if let Some(n) = common.eval_subset {
                set_eval_subset(&mut config, n);
            }
            let outcome = cmd_layerwise(&config, epsilon)?;
            for step in &outcome.steps {
                println!(
                    "layer {}: selected {} filters ({})",
                    step.layer,
                    step.k_star,
                    step.run_dir.display()
                );
            }
            println!(
                "filters {} -> {}, parameters {} -> {} ({:.1}% reduction)",
                outcome.filters_before,
                outcome.filters_after,
                outcome.params_before,
                outcome.params_after,
                100.0 * (1.0 - outcome.params_after as f64 / outcome.params_before as f64)
            );
        }
        Command::Plot { curves, out, labels } => {
            if let Some(labels) = &labels {
                if labels.len() != curves.len() {
                    return Err(Error::Config(format!(
                        "{} labels for {} curves",
                        labels.len(),
                        curves.len()
                    )));
                }
            }
            let mut named = Vec::new();
            for (i, path) in curves.iter().enumerate() {
                let name = labels
                    .as_ref()
                    .map(|l| l[i].clone())
                    .unwrap_or_else(|| {
                        path.file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| format!("curve {i}"))
                    });
                named.push((name, CapacityCurve::read(path)?));
            }
            write_svg(&named, &out)?;
            println!("wrote {}", out.display());
        }
        Command::GenData {
            dir,
            n_train,
            n_test,
            seed,
        } => {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (ti, tl) = ndsweep::data::synth::generate(n_train, seed);
            write_mnist_idx(
                &ti,
                &tl,
                28,
                28,
                &dir.join("train-images.idx"),
                &dir.join("train-labels.idx"),
            )?;
            let (ei, el) = ndsweep::data::synth::generate(n_test, seed.wrapping_add(1));
            write_mnist_idx(
                &ei,
                &el,
                28,
                28,
                &dir.join("test-images.idx"),
                &dir.join("test-labels.idx"),
            )?;
            println!(
                "wrote {n_train} train / {n_test} test samples to {}",
                dir.display()
            );
        }
    }
    Ok(())
}

fn set_eval_subset(config: &mut ExperimentConfig, n: usize) {
    use ndsweep::experiment::DatasetConfig;
    match &mut config.dataset {
        DatasetConfig::MnistIdx { eval_subset, .. }
        | DatasetConfig::Cifar10 { eval_subset, .. }
        | DatasetConfig::Synthetic { eval_subset, .. } => *eval_subset = Some(n),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
