//! `causal` — train and run causal-sentence classifiers from the command line.

use clap::{Parser, Subcommand};

use causal_core::cli::{
    cmd_build_vocab, cmd_eval, cmd_predict, cmd_split, cmd_stats, cmd_sweep, cmd_train,
    BuildVocabArgs, EvalArgs, PredictArgs, SplitArgs, StatsArgs, SweepArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "causal",
    version,
    about = "Causality detection for financial sentences: tokenize, train, evaluate, sweep"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Induce a subword vocabulary from a labeled corpus.
    BuildVocab(BuildVocabArgs),
    /// Train an encoder + head and write the best checkpoint.
    Train(TrainArgs),
    /// Score a labeled corpus with a checkpoint.
    Eval(EvalArgs),
    /// Predict labels for unlabeled id<delim>text rows.
    Predict(PredictArgs),
    /// Train one model per sequence length (or profile) and tabulate.
    Sweep(SweepArgs),
    /// Print class counts and the imbalance ratio.
    Stats(StatsArgs),
    /// Write a stratified train/dev split.
    Split(SplitArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildVocab(args) => cmd_build_vocab(args).map(|_| ()),
        Command::Train(args) => cmd_train(args).map(|_| ()),
        Command::Eval(args) => cmd_eval(args).map(|_| ()),
        Command::Predict(args) => cmd_predict(args).map(|_| ()),
        Command::Sweep(args) => cmd_sweep(args).map(|_| ()),
        Command::Stats(args) => cmd_stats(args).map(|_| ()),
        Command::Split(args) => cmd_split(args).map(|_| ()),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
