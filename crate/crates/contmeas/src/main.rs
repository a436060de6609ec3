fn main() {
    std::process::exit(contmeas::cli::main_with_args(std::env::args_os()));
}
