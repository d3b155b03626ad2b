fn main() {
    std::process::exit(relchain::cli::run(std::env::args_os()));
}
