mod args;
mod artifacts;
mod commands;

use std::process::ExitCode;

use args::{Command, ParseFailure};
use artifacts::{dump_run_config, RunConfig};
use idu_core::ErrorClass;

const EXIT_DATA: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match args::parse(std::env::args().collect()) {
        Ok(c) => c,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
        Err(ParseFailure::Config(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };

    if let Command::Verify(v) = &cli.command {
        return match commands::verify(v) {
            Ok(0) => ExitCode::SUCCESS,
            Ok(n) => {
                eprintln!("error: {n} digest mismatches");
                ExitCode::from(EXIT_DATA)
            }
            Err(e) => fail(e),
        };
    }

    let run = RunConfig {
        command: cli.command.name(),
        config_file: cli.config.as_deref(),
        args: &cli.command,
    };
    let digest = run.digest();
    let out_dir = match &cli.command {
        Command::BuildDataset(c) => Some(c.out.clone()),
        Command::Select(c) => Some(c.out.clone()),
        Command::Train(c) if !c.dry_run => c.out.clone(),
        Command::Eval(c) => Some(c.out.clone()),
        Command::Stability(c) => Some(c.pipeline.out.clone()),
        Command::Scale(c) => Some(c.pipeline.out.clone()),
        Command::Predict(c) => c.out.clone(),
        _ => None,
    };
    if let Some(dir) = &out_dir {
        if let Err(e) = dump_run_config(dir, &run, &[]) {
            return fail(e);
        }
    }
    let result = match &cli.command {
        Command::BuildDataset(c) => commands::build_dataset(c, &digest),
        Command::Select(c) => commands::select(c, &digest),
        Command::Train(c) => commands::train_cmd(c, &digest),
        Command::Eval(c) => commands::eval(c, &digest),
        Command::Stability(c) => commands::stability(c, &digest),
        Command::Scale(c) => commands::scale(c, &digest),
        Command::Predict(c) => commands::predict(c, &digest),
        Command::Verify(_) => unreachable!("handled above"),
    };
    match result {
        Ok(outputs) => {
            if let Some(dir) = &out_dir {
                if let Err(e) = dump_run_config(dir, &run, &outputs) {
                    return fail(e);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn fail(e: idu_core::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(match e.class() {
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Numeric => EXIT_NUMERIC,
    })
}
