fn main() {
    std::process::exit(ctjoin::cli::main_with_args(std::env::args_os()));
}
