//! Argument parsing and dispatch.
//!
//! Each schema key `k` becomes a flag `--k` (underscores written as dashes); a few
//! also have one-letter forms (`-T`, `-C`, `-d`). `-nh` is accepted as `--nh`.
//!
//! Exit status: 0 when every check passed, 1 when a check failed, 2 for usage
//! errors, 3 for runtime errors (I/O, divergence).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, Command};

use crate::config::{RunConfig, Schema};
use crate::error::{HarnessError, Result};
use crate::output::VERSION;
use crate::{bench, equiv, schedule, train, Report};

pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ERROR: u8 = 3;

pub fn schemas() -> Vec<Schema> {
    vec![equiv::schema(), bench::schema(), train::schema(), schedule::schema()]
}

pub fn command() -> Command {
    let mut cmd = Command::new("magattn")
        .version(VERSION)
        .about("Gated softmax + linear attention: equivalence suites, benchmarks, training, schedules")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for schema in schemas() {
        let mut sub = Command::new(schema.command).about(schema.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags override it"),
        );
        for key in &schema.keys {
            let mut arg = Arg::new(key.name)
                .long(key.flag())
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(format!("{} [default: {}]", key.help, if key.default.is_empty() { "none" } else { key.default }));
            if key.is_switch() {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            if let Some(c) = key.short {
                arg = arg.short(c);
            }
            sub = sub.arg(arg);
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// `-nh 2` would otherwise parse as `-n -h`.
pub fn rewrite_args<I, T>(args: I) -> Vec<OsString>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    args.into_iter()
        .map(|a| {
            let a: OsString = a.into();
            match a.to_str() {
                Some("-nh") => "--nh".into(),
                Some(s) if s.starts_with("-nh=") => format!("-{s}").into(),
                _ => a,
            }
        })
        .collect()
}

/// Resolves the configuration of a parsed subcommand.
pub fn resolve(schema: &Schema, m: &clap::ArgMatches) -> Result<RunConfig> {
    let file = m.get_one::<String>("config").map(PathBuf::from);
    let overrides: Vec<(String, String)> = schema
        .keys
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(schema, file.as_deref(), &overrides)
}

pub fn dispatch(cfg: &RunConfig) -> Result<Report> {
    match cfg.command {
        "equiv" => equiv::run(cfg),
        "bench" => bench::run(cfg),
        "train" => train::run(cfg),
        "schedule" => schedule::run(cfg),
        other => Err(HarnessError::Usage(format!("unknown command '{other}'"))),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let matches = match command().try_get_matches_from(rewrite_args(args)) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let Some((name, sub)) = matches.subcommand() else { return EXIT_USAGE };
    let schema = schemas().into_iter().find(|s| s.command == name).expect("subcommands come from the schemas");
    match resolve(&schema, sub).and_then(|cfg| dispatch(&cfg)) {
        Ok(report) if report.passed => 0,
        Ok(_) => EXIT_FAILED,
        Err(HarnessError::Usage(msg)) => {
            eprintln!("magattn {name}: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("magattn {name}: {e}");
            EXIT_ERROR
        }
    }
}
