fn main() {
    std::process::exit(pharmcoords::cli::main_with_args(std::env::args_os()));
}
