//! Command-line front end: one subcommand per pipeline stage.

pub mod cli;
mod commands;
pub mod manifest;
pub mod recipe;
pub mod selfcheck;

use anyhow::Result;

use crate::cli::Cmd;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let (cli, cfg) = cli::parse(args)?;
    if cfg.threads > 0 {
        // Only the first call can configure the global pool; later calls
        // (recipe stages) inherit it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match &cli.command {
        Cmd::Dedup(a) => commands::dedup(a, &cfg),
        Cmd::IndexBm25(a) => commands::index_bm25(a, &cfg),
        Cmd::Retrieve(a) => commands::retrieve(a, &cfg),
        Cmd::PretrainPairs(a) => commands::pretrain_pairs(a, &cfg),
        Cmd::Pretrain(a) => commands::pretrain(a, &cfg),
        Cmd::Train(a) => commands::train_cmd(a, &cfg),
        Cmd::EncodeCorpus(a) => commands::encode(a, &cfg),
        Cmd::Search(a) => commands::search_cmd(a, &cfg),
        Cmd::Mine(a) => commands::mine(a, &cfg),
        Cmd::TrainReader(a) => commands::train_reader_cmd(a, &cfg),
        Cmd::Answer(a) => commands::answer(a, &cfg),
        Cmd::EvalRetrieval(a) => commands::eval_retrieval(a, &cfg),
        Cmd::EvalQa(a) => commands::eval_qa(a, &cfg),
        Cmd::Significance(a) => commands::significance(a, &cfg),
        Cmd::Recipe(a) => recipe::run_recipe(a, &cfg),
        Cmd::Selfcheck(a) => {
            print!("{}", selfcheck::report(&selfcheck::run_checks(a.fixture_seed)));
            Ok(())
        }
        Cmd::Synthesize(a) => commands::synthesize(a, &cfg),
    }
}
