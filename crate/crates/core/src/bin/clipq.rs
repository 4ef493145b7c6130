use clap::Parser;

use clipq::cli::{run, Cli, THREADS_ENV};

fn main() -> anyhow::Result<()> {
    if let Ok(threads) = std::env::var(THREADS_ENV) {
        let threads: usize = threads
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {threads:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    run(Cli::parse())
}
