fn main() {
    std::process::exit(infoflow::cli::main_with_args(std::env::args_os()));
}
