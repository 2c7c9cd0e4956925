mod args;
mod commands;
mod manifest;

use std::fs;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;

use args::{Cli, Command};
use manifest::Manifest;

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("OVERDILUTE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("OVERDILUTE_THREADS={v:?} is not a thread count"))?;
    if n == 0 {
        bail!("OVERDILUTE_THREADS must be >= 1");
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn run(argv: Vec<String>) -> Result<()> {
    let cli = Cli::try_parse_from(&argv).unwrap_or_else(|e| e.exit());
    let command = match cli.command {
        Command::Rerun(r) => {
            let mut recorded = manifest::read_args(&r.manifest)?;
            if recorded.first().map(String::as_str) == Some("rerun") {
                bail!("manifest records a rerun");
            }
            let mut argv = vec![argv[0].clone()];
            argv.append(&mut recorded);
            argv.push("--out".into());
            argv.push(r.out.to_string_lossy().into_owned());
            return run(argv);
        }
        c => c,
    };
    let out = match &command {
        Command::Analyze(a) => &a.out,
        Command::Train(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Synth(a) => &a.out,
        Command::GenBase(a) => &a.out,
        Command::Rerun(_) => unreachable!(),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut m = Manifest::new(out, &argv[1..]);
    match &command {
        Command::Analyze(a) => commands::analyze(a, &mut m)?,
        Command::Train(a) => commands::train(a, &mut m)?,
        Command::Eval(a) => commands::eval(a, &mut m)?,
        Command::Synth(a) => commands::synth(a, &mut m)?,
        Command::GenBase(a) => commands::gen_base(a, &mut m)?,
        Command::Rerun(_) => unreachable!(),
    }
    m.finish()
}

fn main() -> ExitCode {
    let result = configure_threads().and_then(|()| run(std::env::args().collect()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
