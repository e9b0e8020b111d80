fn main() {
    std::process::exit(airy_kam::cli::run_from(std::env::args_os()));
}
