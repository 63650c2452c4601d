fn main() {
    std::process::exit(mlcc::cli::run(std::env::args_os()));
}
