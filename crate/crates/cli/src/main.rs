fn main() {
    std::process::exit(sammix_cli::run(std::env::args_os()));
}
