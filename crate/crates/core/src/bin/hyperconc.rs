fn main() {
    std::process::exit(hyperconc::cli::main_with_args(std::env::args_os()));
}
