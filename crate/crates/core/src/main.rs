use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cordwarp::phantom::PhantomSpec;
use cordwarp::pipeline::{self, PipelineConfig};
use cordwarp::{Error, Result};

#[derive(Parser)]
#[command(name = "cordwarp", version, about = "Reversed-polarity EPI distortion correction for spinal cord DWI")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed (phantom: the noise seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic phantom fixture set and a config that runs on it.
    Phantom {
        /// Phantom spec JSON; missing keys take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        field_peak: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 1)]
        subjects: usize,
    },
    /// Estimate fields and correct every subject's series.
    Correct,
    /// Tensor metrics, similarity and statistics per condition.
    Evaluate,
    /// Render blinded montages and the rating session.
    Montage,
    /// Serve the rating API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Pairwise rank statistics from a rankings CSV.
    RankStats {
        /// Defaults to <output_dir>/rating/rankings.csv.
        rankings: Option<PathBuf>,
        /// Defaults to <output_dir>/rank_stats.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::Phantom { spec, field_peak, noise, subjects } => {
            let mut s = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(e.to_string()))?
                }
                None => PhantomSpec::default(),
            };
            if let Some(v) = field_peak {
                s.field_peak = *v;
            }
            if let Some(v) = noise {
                s.noise_sigma = *v;
            }
            if let Some(v) = cli.seed {
                s.seed = v;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("phantom"));
            let cfg = pipeline::cmd_phantom(&s, *subjects, &out)?;
            println!("{}", cfg.display());
        }
        Cmd::Correct => {
            let runs = pipeline::cmd_correct(&config(cli)?)?;
            let mut ok = true;
            for r in &runs {
                println!("{} {}: {} iterations, converged={}", r.subject, r.method, r.iterations, r.converged);
                ok &= r.converged;
            }
            if !ok {
                eprintln!("some runs did not converge; outputs were written anyway");
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Evaluate => {
            let cfg = config(cli)?;
            let s = pipeline::cmd_evaluate(&cfg)?;
            println!("{}", cfg.output_dir.join(pipeline::SUMMARY_FILE).display());
            for (metric, why) in &s.tukey_skipped {
                eprintln!("no Tukey table for {metric}: {why}");
            }
        }
        Cmd::Montage => {
            let s = pipeline::cmd_montage(&config(cli)?)?;
            println!("{} cases", s.cases.len());
        }
        Cmd::Serve { port } => pipeline::cmd_serve(&config(cli)?, *port)?,
        Cmd::RankStats { rankings, output } => {
            let base = match &cli.config {
                Some(_) => config(cli)?.output_dir,
                None => cli.out.clone().unwrap_or_else(|| PathBuf::from(".")),
            };
            let input = rankings
                .clone()
                .unwrap_or_else(|| pipeline::montage::rating_dir_of(&base).join(pipeline::serve::RANKINGS_FILE));
            let output = output.clone().unwrap_or_else(|| base.join("rank_stats.csv"));
            for r in pipeline::cmd_rank_stats(Path::new(&input), &output)? {
                println!("{} vs {}: {}-{} p={:.3e}{}", r.method1, r.method2, r.wins1, r.wins2, r.p_value, if r.fallback { " (exact)" } else { "" });
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
