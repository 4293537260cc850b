fn main() {
    std::process::exit(drkit::cli::main_with_args(std::env::args_os()));
}
