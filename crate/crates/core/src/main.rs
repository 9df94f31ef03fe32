use clap::Parser;

use srnn::cli::{run, Cli};
use srnn::exec::{threads_from_env, with_threads};

fn main() {
    let cli = Cli::parse();
    let code = with_threads(threads_from_env(), || run(cli));
    std::process::exit(code);
}
