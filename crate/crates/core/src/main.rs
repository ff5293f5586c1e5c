fn main() {
    std::process::exit(satsem::cli::run_cli(std::env::args_os()));
}
