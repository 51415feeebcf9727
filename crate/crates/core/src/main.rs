fn main() {
    std::process::exit(hyciss::cli::main_with_args(std::env::args_os()));
}
