use clap::Parser;

fn main() {
    std::process::exit(mfgmv_cli::run(mfgmv_cli::Cli::parse()));
}
