use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use dcmg::output::write_text;
use dcmg::{emit_csv, emit_events, parse_scenario, verify, Dims, LoadedScenario, SummaryReport};
use dcmg_core::{
    solve_closed_loop_equilibrium, solve_droop_equilibrium, solve_eic, IntegratorSettings, LoadMask,
    Simulation,
};

/// DC microgrid simulator with a consensus secondary controller.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum IntegratorArg {
    Rk4,
    Trapezoidal,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write the trajectory CSV, event log and summary.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the integrator step (s).
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, value_enum)]
        integrator: Option<IntegratorArg>,
    },
    /// Economic dispatch of a total current among the scenario's generators.
    Dispatch {
        #[arg(long)]
        scenario: PathBuf,
        /// Total demand (A).
        #[arg(long)]
        demand: f64,
    },
    /// Steady state of the scenario's network from the Newton oracle.
    Equilibrium {
        #[arg(long)]
        scenario: PathBuf,
        /// Generator (1-based) to leave unplugged; may repeat.
        #[arg(long)]
        unplug: Vec<usize>,
        /// Keep constant-power loads off.
        #[arg(long)]
        no_cpl: bool,
        /// Droop steady state (u = 0) instead of the closed loop.
        #[arg(long)]
        droop: bool,
    },
    /// Run the scenario and every acceptance check; exit 1 if any fails.
    Verify {
        #[arg(long)]
        scenario: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    /// A criterion failed or the verification run itself broke down.
    Criteria(Option<String>),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Criteria(msg)) => {
            if let Some(msg) = msg {
                eprintln!("error: {msg}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &Path) -> Result<LoadedScenario, Failure> {
    parse_scenario(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Simulate { scenario, out, dt, integrator } => {
            let ld = load(&scenario)?;
            let mut settings = ld.settings;
            if let Some(i) = integrator {
                let base = match i {
                    IntegratorArg::Rk4 => IntegratorSettings::rk4(),
                    IntegratorArg::Trapezoidal => IntegratorSettings::trapezoidal(),
                };
                settings.integrator = base.integrator;
                if dt.is_none() && ld.file.simulation.dt.is_none() {
                    settings.h = base.h;
                }
            }
            if let Some(h) = dt {
                settings.h = h;
            }
            let sim = Simulation::new(ld.spec.clone(), ld.cfg.clone(), settings).map_err(usage)?;
            let started = Instant::now();
            let traj = sim.run(&ld.scenario).map_err(usage)?;
            let wall = started.elapsed().as_secs_f64();
            fs::create_dir_all(&out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
            emit_csv(&traj.samples, Dims::of(&ld.spec), &out.join(&ld.output.trajectory)).map_err(usage)?;
            emit_events(&traj.events, &out.join(&ld.output.events)).map_err(usage)?;
            let summary = SummaryReport::new(&ld.name, &ld.spec, &traj, wall).to_string();
            write_text(&summary, &out.join(&ld.output.summary)).map_err(usage)?;
            print!("{summary}");
            Ok(())
        }
        Command::Dispatch { scenario, demand } => {
            let ld = load(&scenario)?;
            let sol = solve_eic(ld.spec.gens(), demand).map_err(usage)?;
            println!("lambda_opt = {:.9} $/A", sol.lambda_opt);
            for (i, c) in sol.currents.iter().enumerate() {
                println!("DG{}  I = {c:.9} A", i + 1);
            }
            println!("total cost = {:.9} $", sol.total_cost);
            Ok(())
        }
        Command::Equilibrium { scenario, unplug, no_cpl, droop } => {
            let ld = load(&scenario)?;
            let ng = ld.spec.n_gens();
            let mut active = vec![true; ng];
            for i in unplug {
                if i == 0 || i > ng {
                    return Err(Failure::Usage(format!("--unplug {i}: generators are numbered 1..={ng}")));
                }
                active[i - 1] = false;
            }
            let nb = ld.spec.n_buses();
            let loads = if no_cpl { LoadMask::without_cpl(nb) } else { LoadMask::all_on(nb) };
            let eq = if droop {
                solve_droop_equilibrium(&ld.spec, &loads, &active, &vec![0.0; ng])
            } else {
                solve_closed_loop_equilibrium(&ld.spec, &ld.cfg, &loads, &active)
            }
            .map_err(usage)?;
            if let Some(l) = eq.lambda_opt {
                println!("lambda_opt = {l:.9} $/A");
            }
            let lambdas = eq.lambdas(ld.spec.gens());
            for i in 0..ng {
                if active[i] {
                    println!("DG{}  V = {:.9} V  I = {:.9} A  lambda = {:.9} $/A", i + 1, eq.v_gen[i], eq.i_g[i], lambdas[i]);
                } else {
                    println!("DG{}  unplugged", i + 1);
                }
            }
            for (k, v) in eq.v_n.iter().enumerate() {
                println!("bus {}  V = {v:.9} V", k + 1);
            }
            for (j, c) in eq.i_e.iter().enumerate() {
                println!("line {}  I = {c:.9} A", j + 1);
            }
            println!("weighted average voltage = {:.9} V", eq.weighted_average_voltage(ld.spec.gens()));
            println!("Newton iterations {}  residual {:.3e}", eq.iterations, eq.residual_norm);
            if eq.low_voltage_branch {
                println!("warning: low-voltage root");
            }
            Ok(())
        }
        Command::Verify { scenario, report } => {
            let ld = load(&scenario)?;
            let r = verify(&ld).map_err(|e| Failure::Criteria(Some(e.to_string())))?;
            let text = format!("{}\n{}", r.summary, r.table());
            print!("{text}");
            if let Some(p) = report {
                write_text(&text, &p).map_err(usage)?;
            }
            if r.passed() {
                Ok(())
            } else {
                Err(Failure::Criteria(None))
            }
        }
    }
}
