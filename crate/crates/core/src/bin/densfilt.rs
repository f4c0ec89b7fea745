//! `densfilt`: run the swarm density benchmark, plot results, check configs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use density_filter::harness::{parse_grid_size, render_plots, OUTPUT_DIR_ENV};
use density_filter::{run_experiment, Error, Exec, Mode, Result, RiccatiScheme, ScenarioConfig};

#[derive(Parser)]
#[command(name = "densfilt", version, about = "Swarm density filtering: KDE fused with the Fokker-Planck equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every (seed, bandwidth) sub-run and write the output files.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Run all kernels on the calling thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Render SVG plots from a finished output directory.
    Plot {
        /// Output directory of an earlier `run`.
        dir: PathBuf,
    },
    /// Resolve and validate a configuration, then print it as TOML.
    ValidateConfig {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

/// Overrides applied on top of the config file (or the benchmark defaults).
#[derive(Args)]
struct ScenarioArgs {
    /// TOML scenario file; omitted fields keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    diffusion: Option<f64>,
    /// Cells per axis, `N` or `NXxNY`.
    #[arg(long, value_parser = parse_grid_size)]
    grid: Option<(usize, usize)>,
    /// Domain as `xmin,xmax,ymin,ymax`.
    #[arg(long, value_delimiter = ',', num_args = 4, allow_negative_numbers = true)]
    bounds: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    dt: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    t_end: Option<f64>,
    /// Repeat for a sweep.
    #[arg(long = "bandwidth", allow_negative_numbers = true)]
    bandwidths: Vec<f64>,
    /// Repeat for several seeds.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    renormalize: Option<bool>,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Snapshot period in steps, 0 for none.
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Initial covariance scale, `P(t0) = p0·I`.
    #[arg(long, allow_negative_numbers = true)]
    p0: Option<f64>,
    #[arg(long, value_enum)]
    scheme: Option<RiccatiScheme>,
    #[arg(long, allow_negative_numbers = true)]
    average_from: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    plots: Option<bool>,
}

impl ScenarioArgs {
    fn resolve(self) -> Result<ScenarioConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<ScenarioConfig>(&text).map_err(|e| Error::Parse {
                    path: p.clone(),
                    message: e.to_string(),
                })?
            }
            None => ScenarioConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(agents => n_agents, diffusion => diffusion, dt => dt, t_end => t_end, mode => mode,
             renormalize => renormalize, out => output_dir, snapshot_every => snapshot_every,
             p0 => p0, scheme => scheme, average_from => average_from, plots => plots);
        if let Some((nx, ny)) = self.grid {
            c.nx = nx;
            c.ny = ny;
        }
        if let Some(b) = self.bounds {
            c.bounds = [b[0], b[1], b[2], b[3]];
        }
        if !self.bandwidths.is_empty() {
            c.bandwidths = self.bandwidths;
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds;
        }
        // validated after overrides, so a flag can fix a bad file value
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { scenario, sequential } => {
            let cfg = scenario.resolve()?;
            let exec = if sequential { Exec::Sequential } else { Exec::Parallel };
            let (report, files) = run_experiment(&cfg, exec)?;
            let avg = |f: Option<f64>| f.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!("bandwidth  median_filter  median_kde  seeds");
            for r in report.summary() {
                println!("{:<9}  {:>13}  {:>10.4}  {:>5}", r.bandwidth, avg(r.median_filter), r.median_kde, r.seeds);
            }
            println!("wrote {} run files to {}", files.run_csv.len(), cfg.output_dir.display());
            for p in &files.plots {
                println!("plot {}", p.display());
            }
        }
        Command::Plot { dir } => {
            for p in render_plots(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::ValidateConfig { scenario } => {
            let cfg = scenario.resolve()?;
            print!("{}", cfg.to_toml());
            eprintln!("ok: {} sub-runs of {} steps", cfg.sub_runs().len(), cfg.steps());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("densfilt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
