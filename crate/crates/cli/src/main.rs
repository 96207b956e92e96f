use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fluidbeam_core::channel::{sample_scenario, CsiRadiusMode, Scenario, ScenarioConfig};
use fluidbeam_bench::{
    record_file_name, run_scheme, run_sweep, scenario_digest, summarize, with_csi_error, write_results_csv, write_summary_csv, RunOptions,
    SchemeName, SweepSpec,
};

#[derive(Parser)]
#[command(name = "fluidbeam", version, about = "Fluid-antenna ISAC positioning and beamforming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a scenario and write it as JSON.
    Gen {
        /// Scenario configuration JSON; omitted fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one scheme on a scenario file.
    Solve {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value_t = SchemeName::ProposedPerfect)]
        scheme: SchemeName,
        /// Seed for FARP layouts and Gaussian randomization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        run: RunArgs,
        /// Write the run record here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a parameter sweep and write CSV tables plus per-run JSON.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    grid_n: Option<usize>,
    /// Relative CSI error level; rescales every user's error radius.
    #[arg(long)]
    eps: Option<f64>,
}

impl RunArgs {
    fn apply(&self, opts: &mut RunOptions) -> Result<()> {
        if let Some(xi) = self.xi {
            if !(xi >= 0.0) {
                bail!("--xi must be nonnegative");
            }
            opts.xi = xi;
        }
        if let Some(m) = self.max_outer {
            if m == 0 {
                bail!("--max-outer must be at least 1");
            }
            opts.max_outer = m;
        }
        if let Some(n) = self.grid_n {
            if n == 0 {
                bail!("--grid-n must be at least 1");
            }
            opts.grid_n = n;
        }
        Ok(())
    }

    fn eps(&self) -> Result<Option<f64>> {
        match self.eps {
            Some(e) if !(e >= 0.0) => bail!("--eps must be nonnegative"),
            e => Ok(e),
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let config: ScenarioConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => ScenarioConfig::default(),
    };
    let scenario = sample_scenario(&config, seed)?;
    fs::write(out, scenario.to_json() + "\n").with_context(|| format!("writing {}", out.display()))?;
    println!("{}", scenario_digest(&scenario));
    Ok(())
}

fn solve(path: &Path, scheme: SchemeName, seed: u64, run: &RunArgs, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut scenario = Scenario::from_json(&text).with_context(|| format!("invalid scenario {}", path.display()))?;
    if let Some(eps) = run.eps()? {
        scenario = with_csi_error(&scenario, eps, CsiRadiusMode::Squared);
    }
    let mut opts = RunOptions::default();
    run.apply(&mut opts)?;
    let record = run_scheme(&scenario, scheme, seed, &opts);
    if let Some(e) = &record.error {
        log::warn!("{scheme} failed: {e}");
    }
    match out {
        Some(p) => write_json(p, &record),
        None => {
            println!("{}", serde_json::to_string_pretty(&record)?);
            Ok(())
        }
    }
}

fn sweep(path: &Path, out: &Path, jobs: Option<usize>, run: &RunArgs) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut spec: SweepSpec = serde_json::from_str(&text).with_context(|| format!("invalid sweep spec {}", path.display()))?;
    run.apply(&mut spec.run)?;
    if let Some(eps) = run.eps()? {
        spec.base.csi_error_ratio = eps;
    }
    spec.validate().map_err(anyhow::Error::msg)?;
    fs::create_dir_all(out.join("runs")).with_context(|| format!("creating {}", out.display()))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        pool = pool.num_threads(j.max(1));
    }
    let records = pool.build()?.install(|| run_sweep(&spec)).map_err(anyhow::Error::msg)?;
    for r in &records {
        if let Some(e) = &r.error {
            log::warn!("{} seed {} at {:?}: {e}", r.scheme, r.seed, r.axis_value);
        }
        write_json(&out.join("runs").join(record_file_name(r)), r)?;
    }
    write_results_csv(&out.join("results.csv"), &records)?;
    write_summary_csv(&out.join("summary.csv"), &summarize(&records))?;
    println!("{} runs written to {}", records.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLUIDBEAM_LOG", "warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen { config, seed, out } => gen(config.as_deref(), *seed, out),
        Command::Solve { scenario, scheme, seed, run, out } => solve(scenario, *scheme, *seed, run, out.as_deref()),
        Command::Sweep { spec, out, jobs, run } => sweep(spec, out, *jobs, run),
    }
}
