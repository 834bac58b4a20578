//! `i2cl` — experiment runner.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure.

mod args;
mod commands;
mod config;

use std::fmt;

use clap::Parser;
use i2cl_core::CoreError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Numeric(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(_)
            | CoreError::Diverged { .. }
            | CoreError::CalibrationDiverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn main() {
    let cli = args::Cli::parse();
    let result = match &cli.command {
        args::Command::Pretrain(a) => commands::cmd_pretrain(a),
        args::Command::Calibrate(a) => commands::cmd_calibrate(a),
        args::Command::Eval(a) => commands::cmd_eval(a),
        args::Command::Sweep(a) => commands::cmd_sweep(a),
        args::Command::Transfer(a) => commands::cmd_transfer(a),
        args::Command::Export(a) => commands::cmd_export(a),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            std::process::exit(3);
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::commands::layer_preset;

    #[test]
    fn layer_presets_partition_into_thirds() {
        for n_layers in 1..=13 {
            let all = layer_preset(n_layers, "all").unwrap();
            let early = layer_preset(n_layers, "early").unwrap();
            let middle = layer_preset(n_layers, "middle").unwrap();
            let late = layer_preset(n_layers, "late").unwrap();
            assert_eq!(all.len(), n_layers);
            // disjoint
            assert!(early.intersection(&middle).next().is_none());
            assert!(middle.intersection(&late).next().is_none());
            assert!(early.intersection(&late).next().is_none());
            // cover
            let union: std::collections::BTreeSet<usize> =
                early.union(&middle).chain(&late).copied().collect();
            assert_eq!(union, all);
            // near-equal thirds
            for part in [&early, &middle, &late] {
                assert!(part.len() <= n_layers / 3 + 1);
            }
        }
        assert!(layer_preset(6, "bogus").is_none());
    }
}
