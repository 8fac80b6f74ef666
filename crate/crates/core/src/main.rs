fn main() {
    std::process::exit(semiconvex::harness::cli::run_cli(std::env::args_os()));
}
