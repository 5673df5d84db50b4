mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pego_core::PegoError;

/// Adapter-group fine-tuning of a frozen vision transformer, with
/// leave-one-domain-out evaluation and weight/feature diagnostics.
#[derive(Parser)]
#[command(name = "pego", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-domain dataset.
    Gen(GenArgs),
    /// Fit the frozen stand-in backbone and save it.
    Pretrain(PretrainArgs),
    /// One training run with a held-out domain; writes pre- and post-merge checkpoints.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on one domain.
    Eval(EvalArgs),
    /// Leave-one-domain-out over every domain and seed.
    Lodo(ProtocolArgs),
    /// The preserve/diversify on-off grid plus a single-adapter reference row.
    Ablate(ProtocolArgs),
    /// Select the group size by validation accuracy.
    Sweep(SweepArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Principal-component and feature-projection exports.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file with `TrainConfig` fields; the desk-scale defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    group_n: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, conflicts_with = "paper_iters")]
    iters: Option<usize>,
    /// Use the full-scale iteration count (5000).
    #[arg(long)]
    paper_iters: bool,
    #[arg(long)]
    batch_per_domain: Option<usize>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frozen backbone checkpoint; fitted in-process when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Held-out domain, by name or index.
    #[arg(long, default_value = "0")]
    test_domain: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Domain name or index.
    #[arg(long)]
    domain: String,
}

#[derive(Args)]
struct ProtocolArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Concurrent runs, capped by PEGO_THREADS.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Candidate group sizes; the config's `n_search` when absent.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectedFault {
    L1Sign,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<InjectedFault>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint with adapters, or the post-merge half of a pair.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Backbone the checkpoint was trained from, for post-merge checkpoints.
    #[arg(long)]
    pre: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `BLOCK.PROJ`, e.g. `1.wv`; the last block's value projection by default.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Samples in the feature projection, spread evenly across domains.
    #[arg(long, default_value_t = 200)]
    max_samples: usize,
}

fn exit_code(e: &PegoError) -> u8 {
    match e {
        PegoError::Config(_) | PegoError::Input(_) | PegoError::Split(_) | PegoError::Shape { .. } => 2,
        PegoError::Io { .. } | PegoError::Format(_) => 3,
        PegoError::Degenerate(_) => 4,
        PegoError::Numeric(_)
        | PegoError::Protocol(_)
        | PegoError::InconclusiveCheck { .. }
        | PegoError::FrozenParam(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Lodo(a) => commands::lodo(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Analyze(a) => commands::analyze(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let io = PegoError::Io {
            path: PathBuf::from("x"),
            source: std::io::Error::other("boom"),
        };
        let cases = [
            (PegoError::Config("c".into()), 2),
            (PegoError::Split("s".into()), 2),
            (io, 3),
            (PegoError::Format("f".into()), 3),
            (PegoError::Degenerate("d".into()), 4),
            (PegoError::Protocol("p".into()), 1),
            (
                PegoError::InconclusiveCheck {
                    accepted: 1,
                    requested: 10,
                },
                1,
            ),
        ];
        for (err, code) in cases {
            assert_eq!(exit_code(&err), code, "{err}");
        }
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "pego",
            "lodo",
            "--dataset",
            "d",
            "--out",
            "o",
            "--seeds",
            "4,5",
            "--alpha",
            "0.1",
        ])
        .unwrap();
        let Command::Lodo(a) = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(a.seeds, [4, 5]);
        assert_eq!(a.jobs, 1);
        assert_eq!(a.cfg.alpha, Some(0.1));
        assert!(Cli::try_parse_from([
            "pego",
            "train",
            "--dataset",
            "d",
            "--out",
            "o",
            "--iters",
            "3",
            "--paper-iters"
        ])
        .is_err());
        let cli = Cli::try_parse_from(["pego", "sweep", "--dataset", "d", "--out", "o", "--values", "2,6"]).unwrap();
        let Command::Sweep(a) = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(a.values, Some(vec![2, 6]));
        assert_eq!(a.protocol.seeds, [0, 1, 2]);
    }
}
