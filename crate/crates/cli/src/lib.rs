//! Command-line front end: dataset preparation, training, evaluation,
//! ablations and probes, each leaving CSV/JSON outputs plus a manifest.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod settings;

use anyhow::Result;

pub use args::{Cli, Command, Mode};
pub use manifest::RunManifest;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::ProbeQa(a) => commands::probe_qa(a),
        Command::Synth(a) => commands::synth(a),
        Command::Report(a) => commands::report(a),
    }
}
