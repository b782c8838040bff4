fn main() {
    std::process::exit(hvector_cli::main_with(std::env::args_os()));
}
