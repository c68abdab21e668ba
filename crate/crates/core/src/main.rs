fn main() {
    std::process::exit(bipneu::cli::run_cli(std::env::args_os()));
}
