fn main() {
    std::process::exit(metricopt::cli::run_cli(std::env::args_os()));
}
