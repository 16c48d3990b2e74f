fn main() {
    std::process::exit(epochal::cli::main_with_args(std::env::args_os()))
}
