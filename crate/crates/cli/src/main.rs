mod args;
mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::Staged;

const DEFAULT_OUTPUT: &str = "condcov-out";

fn manifest(cli: &Cli, staged: Option<&Staged>) -> String {
    let mut text = String::from("# condcov run manifest; reusable with --config\n");
    text.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("command={}\n", cli.command.name()));
    text.push_str(&format!("seed={}\n", cli.seed));
    for (k, v) in cli.command.echo() {
        text.push_str(&format!("{k}={v}\n"));
    }
    let workers = cli.workers.unwrap_or_else(rayon::current_num_threads);
    text.push_str(&format!("# workers={workers}\n"));
    if let Some(staged) = staged {
        for (k, v) in &staged.notes {
            text.push_str(&format!("# {k}={v}\n"));
        }
    }
    text
}

fn write_all(dir: &Path, files: &[(String, String)]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, contents) in files {
        fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<Staged, condcov::Error> {
    match &cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Band(a) => commands::band(a, cli.seed),
        Command::Simulate(a) => commands::simulate(a, cli.seed),
        Command::Coverage(a) => commands::coverage(a, cli.seed),
    }
}

fn run(argv: Vec<String>) -> u8 {
    let argv = match config::expand_args(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let dir: PathBuf = cli
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    let result = match cli.workers {
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(condcov::Error::InvalidParameter {
                name: "workers",
                reason: e.to_string(),
            }),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(staged) => {
            let mut files = staged.files.clone();
            files.push(("manifest.txt".into(), manifest(&cli, Some(&staged))));
            if let Err(e) = write_all(&dir, &files) {
                eprintln!("error: writing {}: {e}", dir.display());
                return 2;
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_estimation_failure() { 2 } else { 1 };
            let files = [
                ("manifest.txt".to_string(), manifest(&cli, None)),
                ("error.log".to_string(), format!("exit={code}\n{e}\n")),
            ];
            if let Err(io) = write_all(&dir, &files) {
                eprintln!("error: writing {}: {io}", dir.display());
            }
            code
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args().collect()))
}
