use clap::Parser;

fn main() -> anyhow::Result<()> {
    se3d::cli::run(se3d::cli::Cli::parse())
}
