fn main() {
    std::process::exit(opchain::cli::run(std::env::args_os()));
}
