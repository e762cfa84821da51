use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use liwslam::cli::{self, PipelineConfig, RunConfig, EXIT_USAGE};
use liwslam::eval::parse_gate;
use liwslam::Result;

/// 2D LiDAR + IMU + wheel-odometry SLAM. Log verbosity is read from
/// LIWSLAM_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "liwslam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn config(&self) -> Result<PipelineConfig> {
        PipelineConfig::default().with_overrides(self.set.iter().map(String::as_str))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Replay a dataset through tracking, loop closure and mapping.
    Run {
        dataset_dir: PathBuf,
        #[arg(short, long, default_value = "out")]
        output: PathBuf,
        /// Calibration file (default: DATASET_DIR/calib.txt).
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        no_loop: bool,
        #[arg(long)]
        no_wheel: bool,
        #[arg(long)]
        no_ground: bool,
        /// Drop LiDAR returns beyond this range (m).
        #[arg(long, value_name = "M")]
        range_clip: Option<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long, default_value = "sim")]
        output: PathBuf,
    },
    /// APE/RPE of an estimate against ground truth (TUM files).
    Evaluate {
        estimate: PathBuf,
        ground_truth: PathBuf,
        /// Fail when a metric exceeds its limit, e.g. `ape=0.05`; repeatable.
        #[arg(long, value_name = "KEY=LIMIT")]
        gate: Vec<String>,
        /// Also write the report as a CSV header and row.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rebuild the grid map from a keyframe database.
    ExportMap {
        keyframes: PathBuf,
        #[arg(short, long, default_value = "map.pgm")]
        output: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Locate one query (scan CSV or keyframe file) in a keyframe database.
    Localize {
        keyframes: PathBuf,
        query: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn dispatch(cmd: Command, w: &mut dyn Write) -> Result<u8> {
    match cmd {
        Command::Run {
            dataset_dir,
            output,
            calib,
            no_loop,
            no_wheel,
            no_ground,
            range_clip,
            overrides,
        } => {
            let cfg = RunConfig {
                calib_path: calib,
                loop_closure: !no_loop,
                wheel_factor: !no_wheel,
                ground_factor: !no_ground,
                range_clip,
                pipeline: overrides.config()?,
                ..RunConfig::new(dataset_dir, output)
            };
            cli::cmd_run(&cfg, w)
        }
        Command::Simulate { scenario, seed, output } => cli::cmd_simulate(&scenario, seed, &output, w),
        Command::Evaluate {
            estimate,
            ground_truth,
            gate,
            csv,
            overrides,
        } => {
            let cfg = overrides.config()?;
            let gates = gate.iter().map(|g| parse_gate(g)).collect::<Result<Vec<_>>>()?;
            cli::cmd_evaluate(&estimate, &ground_truth, &cfg.eval, &gates, csv.as_deref(), w)
        }
        Command::ExportMap {
            keyframes,
            output,
            overrides,
        } => cli::cmd_export_map(&keyframes, &output, overrides.config()?.map, w),
        Command::Localize {
            keyframes,
            query,
            overrides,
        } => cli::cmd_localize(&keyframes, &query, &overrides.config()?, w),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LIWSLAM_LOG", "warn")).init();
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(parsed.command, &mut out) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e))
        }
    }
}
