fn main() {
    std::process::exit(ulast::cli::main_with_args(std::env::args_os()));
}
