fn main() {
    std::process::exit(gsnias::cli::run_cli(std::env::args_os()));
}
