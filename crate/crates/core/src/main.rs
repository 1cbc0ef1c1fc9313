fn main() {
    std::process::exit(cloudfit::cli::run_cli(std::env::args_os()));
}
