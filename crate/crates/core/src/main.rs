use clap::Parser;
use featadv::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    run(&cli)?;
    Ok(())
}
