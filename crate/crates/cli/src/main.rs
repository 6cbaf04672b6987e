mod args;
mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use pointtree::Error;

const NUMERIC: u8 = 2;
const CONTRACT: u8 = 3;
const STUCK: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        // usage errors and anything outside the library violate the input contract
        return CONTRACT;
    };
    match e {
        Error::DegenerateCloud(_)
        | Error::RankDeficient { .. }
        | Error::NearInfiniteProjection { .. }
        | Error::DegenerateTriple { .. }
        | Error::TooManyDegenerateTriples { .. }
        | Error::NonFiniteValue(_)
        | Error::NonFiniteLoss { .. } => NUMERIC,
        Error::SamplerStuck { .. } => STUCK,
        _ => CONTRACT,
    }
}

fn main() -> ExitCode {
    let mut cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(CONTRACT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match commands::run(&mut cli, &mut lock).and_then(|()| Ok(lock.flush()?)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
