//! Command-line front end: dataset generation, training, the two
//! localization methods, and the accuracy/runtime/scatter experiments.
//! Exit codes: 0 success, 2 configuration error, 3 format error,
//! 4 training divergence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use nearfield::bench::{run_rmse_experiment, run_runtime_benchmark, scatter_report};
use nearfield::channel::{simulate_snapshots, ChannelModel};
use nearfield::config::FileConfig;
use nearfield::dataset::{generate_dataset, read_dataset, write_dataset};
use nearfield::music::{
    compute_spectrum, estimate_locations_music_from_split, write_spectrum, SearchGrid,
    SpectrumOptions,
};
use nearfield::nn::model::{Architecture, Model};
use nearfield::nn::serialize::{read_model, write_model};
use nearfield::nn::train::{predict_locations, train, TrainingConfig};
use nearfield::rng::{derive_seed, rng_from_seed};
use nearfield::subspace::{eigendecompose, sample_covariance, split_subspaces};
use nearfield::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nfloc",
    about = "Near-field 3D source localization: simulation, MUSIC, CNN, benchmarks"
)]
struct Cli {
    /// TOML configuration file with a [scenario] table.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files (default: current directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labeled dataset and write it to disk.
    Generate {
        /// Number of records.
        #[arg(long)]
        count: usize,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset file.
    Train {
        /// Input dataset path.
        #[arg(long)]
        dataset: PathBuf,
        /// Architecture preset.
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long, default_value_t = 150)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Dropout rate override (default: the preset's rate).
        #[arg(long)]
        dropout: Option<f64>,
        /// Mirror-flip data augmentation across the array mid-planes.
        #[arg(long, default_value_t = false)]
        augment: bool,
        /// Output model path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate test scenes and localize them with 3D MUSIC.
    Music {
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Azimuth grid cell count.
        #[arg(long, default_value_t = 60)]
        grid_az: usize,
        /// Elevation grid cell count.
        #[arg(long, default_value_t = 60)]
        grid_el: usize,
        /// Range grid cell count.
        #[arg(long, default_value_t = 40)]
        grid_range: usize,
        /// Range search lower bound in meters (default: prior bound).
        #[arg(long)]
        range_min: Option<f64>,
        /// Range search upper bound in meters (default: prior bound).
        #[arg(long)]
        range_max: Option<f64>,
        /// Dump the pseudospectrum of the first trial to this file.
        #[arg(long)]
        dump_spectrum: Option<PathBuf>,
    },
    /// Simulate test scenes and localize them with a trained model.
    Predict {
        /// Model file path (falls back to the config's `model` key).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// RMSE of both methods over the (kappa, snapshots) sweep.
    RmseSweep {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Per-sample runtime of both methods over the snapshot sweep.
    RuntimeBench {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Truth vs. estimated locations over random realizations.
    Scatter {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        realizations: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(cli: &Cli) -> Result<FileConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config <file>".into()))?;
    FileConfig::load(path)
}

fn resolve_seed(cli: &Cli, config: &FileConfig) -> u64 {
    cli.seed.or(config.seed).unwrap_or(0)
}

fn out_path(cli: &Cli, config: &FileConfig, name: &str) -> PathBuf {
    let dir = cli
        .out_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    dir.join(name)
}

fn load_model(explicit: &Option<PathBuf>, config: &FileConfig) -> Result<Model> {
    let path = explicit
        .as_ref()
        .or(config.model.as_ref())
        .ok_or_else(|| Error::Config("no model: pass --model or set `model` in the config".into()))?;
    read_model(path)
}

fn write_output(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { count, out } => {
            let config = load_config(cli)?;
            let prior = config.scenario.to_prior()?;
            let seed = resolve_seed(cli, &config);
            let dataset = generate_dataset(&prior, *count, seed)?;
            write_dataset(&dataset, out)?;
            println!(
                "wrote {} ({} records, N={}, K={})",
                out.display(),
                dataset.len(),
                prior.geom.num_antennas(),
                prior.num_sources
            );
            Ok(())
        }
        Command::Train {
            dataset,
            preset,
            epochs,
            lr,
            weight_decay,
            batch,
            dropout,
            augment,
            out,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let data = read_dataset(dataset)?;
            let n = data.prior.geom.num_antennas();
            let k = data.prior.num_sources;
            let mut arch = match preset {
                Preset::Paper => Architecture::paper(n, k),
                Preset::Desk => Architecture::desk(n, k),
            };
            if let Some(rate) = *dropout {
                arch.dropout_rate = rate;
            }
            let config = TrainingConfig {
                learning_rate: *lr,
                weight_decay: *weight_decay,
                batch_size: *batch,
                epochs: *epochs,
                seed,
                augment_flips: *augment,
            };
            println!(
                "training: {} records, lr={lr} weight_decay={weight_decay} batch={batch} epochs={epochs} seed={seed}",
                data.len()
            );
            let (mut model, history) = train(&data, arch, &config)?;
            for entry in &history {
                println!("{}", entry.log_line());
            }
            write_model(&mut model, out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Music {
            trials,
            grid_az,
            grid_el,
            grid_range,
            range_min,
            range_max,
            dump_spectrum,
        } => {
            let config = load_config(cli)?;
            let prior = config.scenario.to_prior()?;
            let seed = resolve_seed(cli, &config);
            let r_lo = range_min.unwrap_or(prior.range_bounds.0);
            let r_hi = range_max.unwrap_or(prior.range_bounds.1);
            let grid = SearchGrid::uniform(
                prior.azimuth_bounds,
                prior.elevation_bounds,
                (r_lo, r_hi),
                (*grid_az, *grid_el, *grid_range),
            )?;
            let channel = ChannelModel::new(&prior.geom, prior.kappa)?;
            let mut csv = String::from(
                "trial,source,truth_x,truth_y,truth_z,est_x,est_y,est_z,degenerate\n",
            );
            for trial in 0..*trials {
                let mut rng = rng_from_seed(derive_seed(seed, trial as u64));
                let truths = prior.draw_sources(&mut rng);
                let batch = simulate_snapshots(
                    &prior.geom,
                    &truths,
                    &channel,
                    prior.num_snapshots,
                    prior.snr_db,
                    derive_seed(derive_seed(seed, 1), trial as u64),
                )?;
                let split = eigendecompose(&sample_covariance(&batch))?;
                if trial == 0 {
                    if let Some(path) = dump_spectrum {
                        let (_, noise) = split_subspaces(&split, prior.num_sources)?;
                        let spectrum = compute_spectrum(&noise, &grid, &prior.geom);
                        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
                        write_spectrum(&spectrum, &mut w)?;
                        println!("wrote {}", path.display());
                    }
                }
                let est = estimate_locations_music_from_split(
                    &split,
                    prior.num_sources,
                    &grid,
                    &prior.geom,
                    SpectrumOptions::default(),
                )?;
                eprintln!(
                    "trial {trial}: music spectrum+peaks took {:.3}s",
                    est.elapsed_seconds
                );
                for (s, (truth, found)) in truths.iter().zip(&est.positions).enumerate() {
                    let t = truth.cartesian;
                    let e = found.cartesian;
                    csv.push_str(&format!(
                        "{trial},{s},{},{},{},{},{},{},{}\n",
                        t[0], t[1], t[2], e[0], e[1], e[2], est.degenerate
                    ));
                }
            }
            write_output(&out_path(cli, &config, "music.csv"), &csv)
        }
        Command::Predict { model, trials } => {
            let config = load_config(cli)?;
            let prior = config.scenario.to_prior()?;
            let seed = resolve_seed(cli, &config);
            let mut model = load_model(model, &config)?;
            let channel = ChannelModel::new(&prior.geom, prior.kappa)?;
            let mut csv =
                String::from("trial,source,truth_x,truth_y,truth_z,pred_x,pred_y,pred_z\n");
            for trial in 0..*trials {
                let mut rng = rng_from_seed(derive_seed(seed, trial as u64));
                let truths = prior.draw_sources(&mut rng);
                let batch = simulate_snapshots(
                    &prior.geom,
                    &truths,
                    &channel,
                    prior.num_snapshots,
                    prior.snr_db,
                    derive_seed(derive_seed(seed, 1), trial as u64),
                )?;
                let split = eigendecompose(&sample_covariance(&batch))?;
                let est = predict_locations(&mut model, &split)?;
                eprintln!(
                    "trial {trial}: model inference took {:.6}s",
                    est.elapsed_seconds
                );
                for (s, (truth, found)) in truths.iter().zip(&est.positions).enumerate() {
                    let t = truth.cartesian;
                    let p = found.cartesian;
                    csv.push_str(&format!(
                        "{trial},{s},{},{},{},{},{},{}\n",
                        t[0], t[1], t[2], p[0], p[1], p[2]
                    ));
                }
            }
            write_output(&out_path(cli, &config, "predictions.csv"), &csv)
        }
        Command::RmseSweep { model } => {
            let config = load_config(cli)?;
            let experiment = config.to_experiment(cli.seed)?;
            let mut model = load_model(model, &config)?;
            let report = run_rmse_experiment(&mut model, &experiment)?;
            write_output(&out_path(cli, &config, "rmse.csv"), &report.to_csv())
        }
        Command::RuntimeBench { model } => {
            let config = load_config(cli)?;
            let experiment = config.to_experiment(cli.seed)?;
            let mut model = load_model(model, &config)?;
            let report = run_runtime_benchmark(&mut model, &experiment)?;
            write_output(&out_path(cli, &config, "runtime.csv"), &report.to_csv())
        }
        Command::Scatter {
            model,
            realizations,
        } => {
            let config = load_config(cli)?;
            let experiment = config.to_experiment(cli.seed)?;
            let mut model = load_model(model, &config)?;
            let csv = scatter_report(&mut model, &experiment, *realizations)?;
            write_output(&out_path(cli, &config, "scatter.csv"), &csv)
        }
    }
}
