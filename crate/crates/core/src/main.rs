use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use leakbench::commands::{self, MatrixConfig, SplitConfig};
use leakbench::dataset::SynthConfig;
use leakbench::io::{read_json, write_json};
use leakbench::split::SplitPlan;
use leakbench::Result;

#[derive(Parser)]
#[command(name = "leakbench", version, about = "Measure how split leakage inflates quality-prediction correlations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grouped dataset (manifest.csv, features.lbfs, run_manifest.json).
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a split plan for a dataset directory.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a split plan for group leakage and tainted test items; prints the audit as JSON.
    Audit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Plan of the fine-tuning stage whose training groups taint the test set.
        #[arg(long)]
        finetune_plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a protocol matrix and write report.json and run_manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Render a report as an SVG bar chart.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        svg: PathBuf,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, seed } => {
            let mut cfg: SynthConfig = read_json(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            for path in commands::generate(&cfg, &config, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Split { data, config, out, seed } => {
            let (dataset, _) = commands::load_data_dir(&data)?;
            let cfg: SplitConfig = read_json(&config)?;
            let plan = commands::make_split(&dataset, &cfg, seed)?;
            write_json(&out, &plan)?;
            println!("wrote {}", out.display());
        }
        Command::Audit {
            data,
            plan,
            finetune_plan,
            out,
        } => {
            let (dataset, _) = commands::load_data_dir(&data)?;
            let plan: SplitPlan = read_json(&plan)?;
            let ft: Option<SplitPlan> = finetune_plan.as_deref().map(read_json).transpose()?;
            let report = commands::audit(&dataset, &plan, ft.as_ref())?;
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Run { config, out, seed, jobs } => {
            let cfg: MatrixConfig = read_json(&config)?;
            let reports = commands::run(&cfg, &config, &out, seed, jobs)?;
            for r in &reports {
                println!(
                    "{}  plcc {:.3} ± {:.3}  srocc {:.3} ± {:.3}",
                    r.protocol, r.summary.plcc_mean, r.summary.plcc_std, r.summary.srocc_mean, r.summary.srocc_std
                );
            }
            println!("wrote {}", Path::new(&out).join(commands::REPORT_FILE).display());
        }
        Command::Report { input, svg } => {
            commands::render_report(&input, &svg)?;
            println!("wrote {}", svg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LEAKBENCH_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!("error[{}]: {}", class.as_str(), e.to_string().replace('\n', " "));
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
