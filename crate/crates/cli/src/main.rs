use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nmpc_core::experiment::run_experiment;
use nmpc_core::scenario::ScenarioFile;
use nmpc_core::track::{synth_track, TrackSpec};

#[derive(Parser)]
#[command(name = "nmpc", version, about = "Closed-loop MPC experiments on the quarter-car suspension")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy and seed of a scenario and write CSVs and summary.json.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (defaults to the available cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Check a scenario and print the effective configuration.
    Validate { scenario: PathBuf },
    /// Road tracks.
    Track {
        #[command(subcommand)]
        command: TrackCommand,
    },
}

#[derive(Subcommand)]
enum TrackCommand {
    /// Sample a track description (or `reference`) into a road-profile file.
    Synth {
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Sample period for the reference track.
        #[arg(long, default_value_t = 0.002)]
        dt: f64,
    },
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { scenario, out, workers } => {
            let s = ScenarioFile::read(&scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let summary = run_experiment(&s, &out, workers).map_err(|e| e.to_string())?;
            println!("road: {}", summary.road);
            for (name, st) in &summary.strategies {
                let med = st.median_reduction_percent.map_or("n/a".to_string(), |m| format!("{m:.3}%"));
                println!("{name:<13} median reduction {med:>9}  positive {}/{}", st.positive_seeds, st.seeds);
            }
            let failed = summary.runs.iter().filter(|r| r.failure.is_some()).count();
            if failed > 0 {
                println!("{failed} run(s) stopped early; see summary.json");
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Validate { scenario } => {
            let s = ScenarioFile::read(&scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
            s.load_road().map_err(|e| e.to_string())?;
            print!("{}", s.echo().map_err(|e| e.to_string())?);
            Ok(())
        }
        Command::Track {
            command: TrackCommand::Synth { spec, out, dt },
        } => {
            let track = if spec == "reference" {
                TrackSpec::reference(dt)
            } else {
                let text = std::fs::read_to_string(&spec).map_err(|e| format!("{spec}: {e}"))?;
                TrackSpec::parse(&text).map_err(|e| format!("{spec}: {e}"))?
            };
            let road = synth_track(&track).map_err(|e| e.to_string())?;
            road.write(&out).map_err(|e| e.to_string())?;
            println!("{} samples at {} s -> {}", road.len(), road.sample_period, out.display());
            Ok(())
        }
    }
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
