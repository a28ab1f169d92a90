use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use microroute::rl::{deserialize_model, QModel};
use microroute::world::{generate_map, GridMapParams};
use microroute::{load_config, load_map_params, pretrain, run_scenario, Error, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "microroute",
    version,
    about = "Grid-city traffic simulation with learning navigators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a map and write it as JSON.
    GenerateMap {
        /// TOML file with map parameters; defaults when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario and write metrics, jam reports and a manifest.
    Run(ScenarioArgs),
    /// Train a few navigators at low density and keep the best models.
    Pretrain(ScenarioArgs),
    /// Print the shape and weight statistics of a model file.
    InspectModel { file: PathBuf },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append the destination direction to the learner state.
    #[arg(long)]
    state_with_td: bool,
    #[arg(long)]
    workers: Option<usize>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.state_with_td |= self.state_with_td;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn inspect(model: &QModel) -> String {
    let mut out = format!(
        "version: {}\nlayer_sizes: {:?}\nparameters: {}\nstep_counter: {}\n",
        model.version,
        model.layer_sizes,
        model.param_count(),
        model.step_counter
    );
    for (l, (w, b)) in model.weights.iter().zip(&model.biases).enumerate() {
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = w.iter().copied().fold(f64::INFINITY, f64::min);
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bmean = b.iter().sum::<f64>() / b.len() as f64;
        out.push_str(&format!(
            "layer {l} ({}x{}): weight mean {mean:.6} std {std:.6} min {min:.6} max {max:.6}; bias mean {bmean:.6}\n",
            model.layer_sizes[l + 1],
            model.layer_sizes[l],
        ));
    }
    out
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenerateMap { params, out } => {
            let params = match params {
                Some(p) => load_map_params(&p)?,
                None => GridMapParams::default(),
            };
            let map = generate_map(&params)?;
            write_file(&out, &map.export().to_json())?;
            let c = map.counts();
            println!(
                "{}x{} patches, {} junctions, {} streets, {} segments, {} signals, {} street patches, capacity {}",
                c.width, c.height, c.junctions, c.streets, c.segments, c.signals, c.street_patches, c.capacity
            );
        }
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let artifacts = run_scenario(&cfg)?;
            info!("metrics written to {}", artifacts.metrics_csv.display());
            println!("{}", artifacts.metrics_csv.display());
            println!("{}", artifacts.jams_csv.display());
            println!("{}", artifacts.manifest.display());
        }
        Command::Pretrain(args) => {
            let cfg = args.resolve()?;
            let outcome = pretrain(&cfg)?;
            for (rank, e) in outcome.ranking.iter().enumerate() {
                println!(
                    "{rank}: vehicle {} reward {:.4} trips {}{}",
                    e.vehicle,
                    e.ranked_reward,
                    e.trips,
                    e.model
                        .as_ref()
                        .map(|p| format!(" -> {}", p.display()))
                        .unwrap_or_default()
                );
            }
        }
        Command::InspectModel { file } => {
            let bytes =
                std::fs::read(&file).map_err(|e| Error::ModelLoad(format!("cannot read {}: {e}", file.display())))?;
            print!("{}", inspect(&deserialize_model(&bytes)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
