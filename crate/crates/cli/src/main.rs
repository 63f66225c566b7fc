use clap::Parser;

fn main() {
    let cli = taskfuse_cli::Cli::parse();
    std::process::exit(taskfuse_cli::execute(&cli));
}
