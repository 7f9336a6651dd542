use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use normlab::harness::checkpoint::load_state;
use normlab::harness::config::RunConfig;
use normlab::harness::gradcheck::{run_gradcheck, GradModule};
use normlab::harness::run::{output_dir, run_experiment, sweep, write_sweep_csv, Experiment, SweepAxis};
use normlab::harness::synthetic::{gen_synthetic, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "normlab",
    version,
    about = "Contrastive training with global normalizer estimators"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset from a spec file.
    GenData {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train according to a config file.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the config's dataset.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Run the cartesian product of `--vary` axes and print a CSV summary.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, required = true)]
        vary: Vec<String>,
        /// Directory for per-run outputs (default: `runs/<stem>-sweep` next to the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData { spec, output } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = SyntheticSpec::parse(&text)?;
            let data = gen_synthetic(&spec)?;
            data.save(&output)
                .with_context(|| format!("writing {}", output.display()))?;
            println!("wrote {} pairs to {}", data.len(), output.display());
        }
        Cmd::Train { config } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let out = output_dir(&cfg, &config);
            let exp = Experiment::new(cfg)?;
            let res = run_experiment(&exp, Some(&out))?;
            if let Some(last) = res.records.last() {
                println!("{}", serde_json::to_string(last)?);
            }
            eprintln!("outputs in {}", out.display());
        }
        Cmd::Eval { config, ckpt } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let exp = Experiment::new(cfg)?;
            let state = load_state(&ckpt, exp.fresh_state()?)
                .with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
            println!("{}", serde_json::to_string(&exp.evaluate(&state, 0)?)?);
        }
        Cmd::Gradcheck { module, seeds } => {
            let Some(m) = GradModule::parse(&module) else {
                return Err(normlab::Error::config(
                    "module",
                    format!("unknown module `{module}` (all, objective, npn, encoders)"),
                )
                .into());
            };
            let results = run_gradcheck(m, seeds)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:45} seed {:3}  max rel err {:.3e}",
                    r.name, r.seed, r.max_rel_err
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", results.len());
            }
            println!("all {} gradient checks passed", results.len());
        }
        Cmd::Sweep { config, vary, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let axes = vary
                .iter()
                .map(|v| SweepAxis::parse(v))
                .collect::<normlab::Result<Vec<_>>>()?;
            let out = out.unwrap_or_else(|| {
                let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
                config_base(&config).join("runs").join(format!("{stem}-sweep"))
            });
            let rows = sweep(&text, &config_base(&config), &axes, &out)?;
            std::fs::create_dir_all(&out)?;
            write_sweep_csv(&axes, &rows, std::fs::File::create(out.join("summary.csv"))?)?;
            write_sweep_csv(&axes, &rows, std::io::stdout().lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<normlab::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
