fn main() {
    std::process::exit(malora::cli::main_with_args(std::env::args_os()));
}
