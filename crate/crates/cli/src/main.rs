use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sensor_registration::batch_io::{read_batch, write_batch};
use sensor_registration::calibration::{calibrate, Algorithm, StoppingCriteria};
use sensor_registration::harness::{
    emit_reports, emit_sweep, run_experiment, simulate_run, sweep, ErrorReport, ExperimentConfig, SweepAxis,
};

/// Angular misalignment registration for 2D/3D sensor networks.
#[derive(Parser)]
#[command(name = "sensor-reg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one realization and write it as a batch file.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Monte-Carlo run index to simulate.
        #[arg(long, default_value_t = 0)]
        run: u64,
        /// Batch CSV path; the sidecar and truth files are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate a recorded or simulated batch file.
    Calibrate {
        /// Batch CSV with a `<name>.sensors.json` sidecar.
        #[arg(long)]
        batch: PathBuf,
        #[arg(long)]
        algorithm: Algorithm,
        #[arg(long, default_value_t = StoppingCriteria::default().rel_cost_tol)]
        rel_tol: f64,
        #[arg(long, default_value_t = StoppingCriteria::default().max_iterations)]
        max_iterations: usize,
        /// Result JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte-Carlo study and write runs.csv, summary.json and cost_trace.csv.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Repeat a study over values of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// sensor_count, noise_std (mRad) or sample_count.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

/// Config file plus overrides; flags take precedence over file values.
#[derive(Args)]
struct Common {
    /// JSON config (a previous summary.json also works). Defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// Number of sensors.
    #[arg(long)]
    sensors: Option<usize>,
    #[arg(long)]
    mc_runs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.algorithm {
            cfg.algorithm = v;
        }
        if let Some(v) = self.sensors {
            cfg.sensors.count = v;
        }
        if let Some(v) = self.mc_runs {
            cfg.mc_runs = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.output.out_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(report: &ErrorReport) {
    let rms = report.rms_mrad;
    println!(
        "{} S={} runs={} success={:.0}% rms yaw {:.3} pitch {:.3} roll {:.3} geodesic {:.3} mRad",
        report.config.algorithm,
        report.config.sensors.count,
        report.runs.len(),
        100.0 * report.success_rate,
        rms.yaw,
        rms.pitch,
        rms.roll,
        rms.geodesic
    );
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { common, run, out } => {
            let cfg = common.load()?;
            let (batch, truth) = simulate_run(&cfg, &cfg.locations()?, run)?;
            write_batch(&batch, &out, Some(&cfg.epoch_indices()))?;
            let truth_path = out.with_extension("truth.json");
            let biases: Vec<[f64; 3]> = truth.biases.iter().map(|b| b.to_degrees()).collect();
            let body = serde_json::json!({ "bias_deg_yaw_pitch_roll": biases });
            std::fs::write(&truth_path, serde_json::to_string_pretty(&body)? + "\n")
                .with_context(|| format!("writing {}", truth_path.display()))?;
            println!(
                "wrote {} ({} sensors, {} epochs)",
                out.display(),
                batch.sensor_count(),
                batch.len()
            );
        }
        Command::Calibrate {
            batch,
            algorithm,
            rel_tol,
            max_iterations,
            out,
        } => {
            let b = read_batch(&batch)?;
            let stop = StoppingCriteria {
                rel_cost_tol: rel_tol,
                max_iterations,
            };
            let result = calibrate(&b, algorithm, &stop)
                .with_context(|| format!("calibrating {} with {algorithm}", batch.display()))?;
            let estimates: Vec<_> = result
                .estimates
                .iter()
                .map(|r| r.to_euler().map(|e| e.to_degrees()).ok())
                .collect();
            let body = serde_json::json!({ "result": result, "estimates_deg_yaw_pitch_roll": estimates });
            let text = serde_json::to_string_pretty(&body)? + "\n";
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Experiment { common } => {
            let cfg = common.load()?;
            let report = run_experiment(&cfg)?;
            let paths = emit_reports(&report, &cfg.output.out_dir)?;
            print_report(&report);
            println!(
                "wrote {}",
                paths.runs_csv.parent().unwrap_or(&cfg.output.out_dir).display()
            );
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.load()?;
            let table = sweep(&cfg, axis, &values)?;
            for (v, report) in table.values.iter().zip(&table.reports) {
                print!("{}={v}: ", axis.name());
                print_report(report);
            }
            println!("wrote {}", emit_sweep(&table, &cfg.output.out_dir)?.display());
        }
    }
    Ok(())
}
