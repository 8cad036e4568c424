//! The `featalign` command line: argument parsing, run manifests and the
//! command implementations. Exit codes: 0 ok, 1 input error, 2 solve failure.

pub mod args;
pub mod commands;
pub mod fleet;
pub mod manifest;

use std::ffi::OsString;

use clap::Parser;

pub use args::Cli;
pub use commands::CliError;
pub use manifest::{Ctx, RunManifest};

/// Runs a parsed invocation inside a pool of `cli.threads` workers and
/// writes the run manifest. Returns the exit code.
pub fn run(cli: &Cli) -> i32 {
    let config = serde_json::to_value(cli).unwrap_or(serde_json::Value::Null);
    let mut ctx = Ctx::new(cli.command.name(), config, cli.command.out());
    let result = if cli.threads == 0 {
        Err(CliError::Input("--threads must be at least 1".into()))
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
            Ok(pool) => pool.install(|| dispatch(cli, &mut ctx)),
            Err(e) => Err(CliError::Input(format!("thread pool: {e}"))),
        }
    };
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ctx.finish(code, result.err().map(|e| e.to_string()));
    code
}

fn dispatch(cli: &Cli, ctx: &mut Ctx) -> Result<(), CliError> {
    use args::Command::*;
    match &cli.command {
        Localize(a) => commands::cmd_localize(a, ctx),
        Refine(a) => commands::cmd_refine(a, ctx),
        FitDamping(a) => commands::cmd_fit_damping(a, ctx),
        Sweep(a) => commands::cmd_sweep(a, ctx),
        Basin(a) => commands::cmd_basin(a, ctx),
        MakeScene(a) => commands::cmd_make_scene(a, ctx),
    }
}

/// Parses `args` (program name first) and runs. Usage errors exit 1;
/// `--help` and `--version` exit 0.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    }
}
