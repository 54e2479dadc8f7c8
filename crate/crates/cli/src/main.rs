use clap::Parser;

fn main() {
    std::process::exit(flowdeblur_cli::run(flowdeblur_cli::Cli::parse()));
}
