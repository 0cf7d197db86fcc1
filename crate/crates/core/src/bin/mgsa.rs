fn main() {
    std::process::exit(mgsa::cli::main_with_args(std::env::args_os()));
}
