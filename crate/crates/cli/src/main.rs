use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mechanochem::integrator::tableau;
use mechanochem::scenario::{run_scenario, ScenarioConfig};
use mechanochem::verification::{convergence_study, StudyKind, StudySettings};

#[derive(Parser)]
#[command(name = "mechanochem", version, about = "Bilayer mechanochemical finite-element solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario described by a TOML file.
    Run {
        config: PathBuf,
        /// Seed of the initial perturbation.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config).
        #[arg(long, env = "MECHANOCHEM_OUT_DIR")]
        out_dir: Option<PathBuf>,
        /// VTK snapshot every k accepted steps (0: initial and final only).
        #[arg(long)]
        snapshot_every: Option<usize>,
        /// Elasticity passes after each accepted step.
        #[arg(long)]
        sweeps: Option<usize>,
        /// Reuse of the Newton iteration matrices.
        #[arg(long, value_enum)]
        mjcontrol: Option<Switch>,
    },
    /// Convergence study on the manufactured solution.
    Verify {
        /// `space` or `time`.
        kind: StudyKind,
        /// Number of refinement levels (at least 3).
        levels: usize,
        /// Directory for the rate table CSV.
        #[arg(long, env = "MECHANOCHEM_OUT_DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Print the Butcher coefficients.
    Tableau,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> mechanochem::Result<()> {
    match cmd {
        Command::Run { config, seed, out_dir, snapshot_every, sweeps, mjcontrol } => {
            let mut cfg = ScenarioConfig::from_file(&config)
                .map_err(|e| mechanochem::Error::Config(format!("{}: {e}", config.display())))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = out_dir {
                cfg.output.dir = d;
            }
            if let Some(k) = snapshot_every {
                cfg.output.snapshot_every = k;
            }
            if let Some(n) = sweeps {
                cfg.coupling.sweeps = n;
            }
            if let Some(m) = mjcontrol {
                cfg.controller.mjcontrol = matches!(m, Switch::On);
            }
            if let Some(mesh) = &cfg.geometry.mesh_file {
                if mesh.is_relative() {
                    let base = config.parent().unwrap_or(Path::new("."));
                    cfg.geometry.mesh_file = Some(base.join(mesh));
                }
            }
            cfg.validate()?;
            let dir = cfg.output.dir.clone();
            let summary = run_scenario(&cfg, Some(&dir))?;
            println!(
                "reached t={} with {} accepted and {} rejected steps; output in {}",
                summary.t,
                summary.accepted,
                summary.rejected,
                dir.display()
            );
            println!("{:<6}{:<14}{:>15}{:>15}{:>15}", "side", "field", "min", "max", "mean");
            for (side, name, st) in &summary.fields {
                println!("{:<6}{:<14}{:>15.6e}{:>15.6e}{:>15.6e}", side.to_string(), name, st.min, st.max, st.mean);
            }
            Ok(())
        }
        Command::Verify { kind, levels, out_dir } => {
            let table = convergence_study(kind, levels, &StudySettings::default())?;
            let csv = table.to_csv()?;
            print!("{csv}");
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir)?;
                let name = match kind {
                    StudyKind::Space => "rates_space.csv",
                    StudyKind::Time => "rates_time.csv",
                };
                fs::write(dir.join(name), csv)?;
            }
            Ok(())
        }
        Command::Tableau => {
            let t = tableau();
            let row = |v: &[f64]| v.iter().map(|x| format!("{x:.16}")).collect::<Vec<_>>().join(" ");
            println!("γ={:.16}", t.gamma);
            for (i, a) in t.a.iter().enumerate() {
                println!("a{}: {}", i + 1, row(a));
            }
            println!("b: {}", row(&t.b));
            println!("b̂: {}", row(&t.bhat));
            println!("c: {}", row(&t.c));
            Ok(())
        }
    }
}
