use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ringqc_cli::output::{self, Artifact};
use ringqc_cli::paper_check::{self, ToleranceProfile};
use ringqc_cli::scenario::{self, Pipeline};
use ringqc_cli::{config, CliError};

#[derive(Debug, Parser)]
#[command(name = "ringqc", version, about = "Feasibility models for qubits in a storage-ring crystal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for output files.
    #[arg(long, global = true, default_value = "ringqc-out")]
    out: PathBuf,
    /// Print the JSON summary instead of the text report.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form feasibility budget.
    Budget(ScenarioArgs),
    /// Crystal equilibrium and phonon spectrum.
    Crystal(ScenarioArgs),
    /// Laser-cooling dynamics, plus stray-field compensation when configured.
    Cool(ScenarioArgs),
    /// Pulse schedule, switching budget and piecewise gates.
    Gates(ScenarioArgs),
    /// Dark-ion pattern tracking.
    Track(ScenarioArgs),
    /// Every section present in the scenario.
    Run(ScenarioArgs),
    /// Recompute the quoted figures and compare.
    PaperCheck {
        #[arg(long, default_value = "default")]
        tolerance_profile: ToleranceProfile,
    },
}

fn run_scenario(args: &ScenarioArgs, pick: Option<&[Pipeline]>) -> Result<(serde_json::Value, Vec<Artifact>, String), CliError> {
    let loaded = config::load(&args.config)?;
    let resolved = scenario::resolve(&loaded, args.seed)?;
    let pipelines = match pick {
        Some(p) => {
            let present = scenario::present(&resolved);
            let chosen: Vec<Pipeline> = p.iter().copied().filter(|x| present.contains(x)).collect();
            if chosen.is_empty() {
                let names: Vec<&str> = p.iter().map(|x| x.key()).collect();
                return Err(CliError::Validation(format!("the scenario has no [{}] section", names.join("] or ["))));
            }
            chosen
        }
        None => scenario::present(&resolved),
    };
    let outcome = scenario::run(&resolved, &pipelines)?;
    let report = String::from_utf8_lossy(&outcome.artifacts.last().expect("report is always written").bytes).into_owned();
    Ok((outcome.summary, outcome.artifacts, report))
}

fn execute(cli: &Cli) -> Result<String, CliError> {
    let (summary, artifacts, report, verdict) = match &cli.command {
        Command::Budget(a) => with_ok(run_scenario(a, Some(&[Pipeline::Budget]))?),
        Command::Crystal(a) => with_ok(run_scenario(a, Some(&[Pipeline::Crystal]))?),
        Command::Cool(a) => with_ok(run_scenario(a, Some(&[Pipeline::Cooling, Pipeline::Stray]))?),
        Command::Gates(a) => with_ok(run_scenario(a, Some(&[Pipeline::Gates]))?),
        Command::Track(a) => with_ok(run_scenario(a, Some(&[Pipeline::Tracking]))?),
        Command::Run(a) => with_ok(run_scenario(a, None)?),
        Command::PaperCheck { tolerance_profile } => {
            let rows = paper_check::paper_check(*tolerance_profile)?;
            let summary = paper_check::to_json(&rows, *tolerance_profile);
            let report = output::render_report("ringqc paper-check", &summary);
            let artifacts = vec![
                Artifact::json("paper_check.json", &summary),
                Artifact::new("paper_check.txt", report.clone().into_bytes()),
            ];
            (summary, artifacts, report, paper_check::check(&rows))
        }
    };
    output::write_all(&cli.out, &artifacts)?;
    let text = if cli.json {
        let mut s = serde_json::to_string_pretty(&summary).expect("JSON values always serialize");
        s.push('\n');
        s
    } else {
        report
    };
    verdict.map(|_| text.clone()).map_err(|e| {
        print!("{text}");
        e
    })
}

type Done = (serde_json::Value, Vec<Artifact>, String, Result<(), CliError>);

fn with_ok((summary, artifacts, report): (serde_json::Value, Vec<Artifact>, String)) -> Done {
    (summary, artifacts, report, Ok(()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ringqc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
