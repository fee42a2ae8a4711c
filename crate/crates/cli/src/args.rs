use std::path::PathBuf;

use ccsfg_core::synthdata::DATA_KEYS;
use ccsfg_core::trainer::KEYS;
use clap::{value_parser, Arg, Command};

pub const DEFAULT_OUT_DIR: &str = "ccsfg-out";

/// `--train-ids` for `train_ids`; the underscore spelling is an alias.
fn key_arg(key: &'static str, heading: &'static str) -> Arg {
    let flag: &'static str = Box::leak(key.replace('_', "-").into_boxed_str());
    let arg = Arg::new(key)
        .long(flag)
        .value_name("VALUE")
        .help_heading(heading)
        .help(format!("Override config key `{key}`"));
    if flag != key {
        arg.alias(key)
    } else {
        arg
    }
}

fn path(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn common(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("seed")
            .long("seed")
            .value_parser(value_parser!(u64))
            .help("Seed for this command"),
    )
    .arg(path("config", "Flat `key = value` config file; flags override it"))
    .arg(
        Arg::new("out-dir")
            .long("out-dir")
            .value_name("DIR")
            .value_parser(value_parser!(PathBuf))
            .help(format!("Artifact directory [default: {DEFAULT_OUT_DIR}]")),
    )
    .args(DATA_KEYS.iter().map(|k| key_arg(k, "Dataset keys")))
    .args(KEYS.iter().map(|k| key_arg(k, "Training keys")))
}

fn sweep(cmd: Command) -> Command {
    common(cmd)
        .arg(path("data", "Dataset file (generated from the config when absent)"))
        .arg(
            Arg::new("seeds")
                .long("seeds")
                .value_name("LIST")
                .value_delimiter(',')
                .value_parser(value_parser!(u64))
                .help("Run seeds [default: --seed, +1, +2 with --seed defaulting to 1]"),
        )
        .arg(
            Arg::new("jobs")
                .long("jobs")
                .value_name("N")
                .value_parser(value_parser!(u64).range(1..))
                .help("Concurrent training runs [default: available cores]"),
        )
}

pub fn command() -> Command {
    Command::new("ccsfg")
        .about("Isolated-camera re-identification with a jointly trained cross-camera generator")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            common(Command::new("gen-data").about("Write a synthetic dataset; --seed is the dataset seed"))
                .arg(path("out", "Dataset file [default: <out-dir>/data.bin]"))
                .arg(
                    Arg::new("overlap")
                        .long("overlap")
                        .value_parser(value_parser!(f64))
                        .default_value("0")
                        .help("Fraction of training people duplicated under a second camera"),
                )
                .arg(
                    Arg::new("overlap-seed")
                        .long("overlap-seed")
                        .value_parser(value_parser!(u64)),
                ),
        )
        .subcommand(
            common(Command::new("train").about("Train one model; --seed derives the init and noise seeds"))
                .arg(path("data", "Dataset file (generated from the config when absent)"))
                .arg(path("resume", "Checkpoint to continue from")),
        )
        .subcommand(
            common(Command::new("eval").about("Score a checkpoint and print the result as JSON"))
                .arg(path("checkpoint", "Checkpoint file").required(true))
                .arg(path("data", "Dataset file (generated from the config when absent)")),
        )
        .subcommand(
            common(Command::new("diagnose").about("Collapse report from a metrics log and/or a feature projection"))
                .arg(path("log", "Metrics log (JSON lines)"))
                .arg(path("checkpoint", "Checkpoint to project"))
                .arg(path("data", "Dataset file (generated from the config when absent)"))
                .arg(
                    Arg::new("identities")
                        .long("identities")
                        .value_name("N")
                        .value_parser(value_parser!(u64).range(1..))
                        .default_value("8")
                        .help("Training identities included in the projection"),
                ),
        )
        .subcommand(sweep(
            Command::new("ablate").about("Condition ablation: neither, c-only, y-only, both"),
        ))
        .subcommand(
            sweep(Command::new("sweep-overlap").about("CCSFG and baseline across overlap ratios"))
                .arg(
                    Arg::new("ratios")
                        .long("ratios")
                        .value_name("LIST")
                        .value_delimiter(',')
                        .value_parser(value_parser!(f64))
                        .default_value("0,0.1,0.2,0.3,0.4,0.5"),
                )
                .arg(
                    Arg::new("overlap-seed")
                        .long("overlap-seed")
                        .value_parser(value_parser!(u64)),
                ),
        )
        .subcommand(sweep(Command::new("compare-generators").about(
            "Baseline, joint training without IFN, and CCSFG with collapse verdicts",
        )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_well_formed() {
        command().debug_assert();
    }

    #[test]
    fn every_config_key_is_a_flag_on_every_subcommand() {
        let cmd = command();
        for sub in cmd.get_subcommands() {
            for key in KEYS.iter().chain(DATA_KEYS) {
                assert!(
                    sub.get_arguments().any(|a| a.get_id() == *key),
                    "{} lacks {key}",
                    sub.get_name()
                );
            }
        }
    }

    #[test]
    fn underscore_spelling_is_accepted() {
        let m = command()
            .try_get_matches_from(["ccsfg", "train", "--train_ids", "12", "--latent-dim", "3"])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        assert_eq!(sub.get_one::<String>("train_ids").unwrap(), "12");
        assert_eq!(sub.get_one::<String>("latent_dim").unwrap(), "3");
    }
}
